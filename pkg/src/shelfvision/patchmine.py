"""Discriminative patch mining: cluster, train, detect, re-cluster, rank.

Per class, HOG windows sampled from half of the training images are
clustered; each cluster trains a linear SVM detector; detectors fire on
the held-out half; clusters re-form from the strongest firings and the
halves swap.  Surviving clusters are ranked by the purity and
discriminativeness of their validation firings, and the best 210
detectors represent the class.

A window "fires" when its score clears ``fire_threshold`` (-1.5 by
default).  Firings on other-class images are the signal that a patch is
shared packaging (a common logo) rather than class-specific; ranking
pushes such detectors out of the bank.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.svm import LinearSVC

from .imagecore import CELL_DESC_LEN, CELL_SIZE, HogGrid
from .kmeans import kmeans

BANK_MAGIC = b"SVDB"
BANK_VERSION = 1

DEFAULT_FIRE_THRESHOLD = -1.5


class MiningError(Exception):
    pass


class DegenerateClusterError(Exception):
    """Positives and negatives coincide; the cluster carries no signal."""


@dataclass(frozen=True)
class MiningParams:
    """Knobs for the mining loop; defaults hold for desk-scale catalogs."""

    window_cells: int = 6
    per_image: int = 25            # seed windows per image per scale
    min_energy: float = 3.0        # mean per-cell gradient energy to keep a seed
    rounds: int = 4
    k_divisor: int = 4             # initial k = max(k_floor, candidates // k_divisor)
    k_floor: int = 4
    detector_c: float = 0.1
    neg_images_per_class: int = 5
    neg_windows_per_image: int = 8   # per scale, before energy rejection
    rank_neg_images_per_class: int = 5
    per_image_top: int = 5         # NMS survivors kept per detector per image
    nms_overlap: float = 0.3
    refine_top: int = 10           # detections seeding the next-round cluster
    min_members: int = 3
    min_fired_images: int = 3
    top_k: int = 210
    fire_threshold: float = DEFAULT_FIRE_THRESHOLD
    rank_top_r: int = 10
    rank_lambda: float = 1.0


@dataclass(frozen=True)
class PatchCandidate:
    image_ref: str
    scale_level: int
    cell_rect: tuple[int, int, int, int]   # x, y, w, h in cells
    descriptor: np.ndarray                 # float32, length w*h*36


@dataclass(frozen=True)
class PatchDetector:
    weights: np.ndarray                    # float32
    bias: float
    class_id: int
    window: tuple[int, int]                # (w, h) in cells
    fire_threshold: float = DEFAULT_FIRE_THRESHOLD

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float32)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", float(np.float32(self.bias)))
        object.__setattr__(self, "fire_threshold", float(np.float32(self.fire_threshold)))

    def score(self, descriptor: np.ndarray) -> float:
        return float(np.float64(self.weights) @ np.float64(descriptor) + self.bias)


@dataclass(eq=False)
class DetectorBank:
    """Per-class ranked detector lists, at most ``top_k`` per class."""

    detectors: list[list[PatchDetector]]
    _blocks: dict | None = field(default=None, repr=False, compare=False)

    @property
    def num_classes(self) -> int:
        return len(self.detectors)

    def __iter__(self):
        for per_class in self.detectors:
            yield from per_class

    def total(self) -> int:
        return sum(len(d) for d in self.detectors)

    def weight_blocks(self) -> dict[tuple[int, int], dict[str, np.ndarray]]:
        """Detectors grouped by window size, stacked for matrix scoring.

        Each block holds ``weights`` (n, dim) float32, ``biases`` (n,),
        ``class_ids`` (n,) and ``indices`` (n,) giving each row's index in
        flat bank order.  Cached; the bank is immutable once built.
        """
        if self._blocks is None:
            groups: dict[tuple[int, int], list[tuple[int, PatchDetector]]] = {}
            for i, det in enumerate(self):
                groups.setdefault(det.window, []).append((i, det))
            blocks = {}
            for window, dets in groups.items():
                blocks[window] = {
                    "weights": np.stack([d.weights for _, d in dets]).astype(np.float32),
                    "biases": np.array([d.bias for _, d in dets], dtype=np.float32),
                    "thresholds": np.array([d.fire_threshold for _, d in dets],
                                           dtype=np.float32),
                    "class_ids": np.array([d.class_id for _, d in dets], dtype=np.int64),
                    "indices": np.array([i for i, _ in dets], dtype=np.int64),
                }
            self._blocks = blocks
        return self._blocks


# ---------------------------------------------------------------------------
# Sliding windows
# ---------------------------------------------------------------------------

def window_positions(grid: HogGrid, window: tuple[int, int]) -> tuple[int, int]:
    """Valid window placements (ny, nx) of ``window`` (w, h) on ``grid``."""
    w, h = window
    return grid.cells_y - h + 1, grid.cells_x - w + 1


def window_matrix(grid: HogGrid, window: tuple[int, int]
                  ) -> tuple[np.ndarray, np.ndarray]:
    """im2col over the cell grid.

    Returns ``(xy, mat)``: cell coordinates (N, 2) as (x, y) and the
    flattened window descriptors (N, w*h*36) float32, rows in row-major
    placement order.  Empty when the grid is smaller than the window.
    """
    w, h = window
    ny, nx = window_positions(grid, window)
    dim = w * h * grid.data.shape[2]
    if ny < 1 or nx < 1:
        return (np.zeros((0, 2), dtype=np.int64),
                np.zeros((0, dim), dtype=np.float32))
    view = np.lib.stride_tricks.sliding_window_view(grid.data, (h, w), axis=(0, 1))
    # view: (ny, nx, 36, h, w) -> (ny, nx, h, w, 36) to match rect.ravel()
    mat = view.transpose(0, 1, 3, 4, 2).reshape(ny * nx, dim)
    ys, xs = np.divmod(np.arange(ny * nx), nx)
    xy = np.stack([xs, ys], axis=1)
    return xy, np.ascontiguousarray(mat, dtype=np.float32)


def window_energy(grid: HogGrid, window: tuple[int, int]) -> np.ndarray:
    """Mean per-cell gradient energy of every window placement, (ny*nx,)."""
    w, h = window
    ny, nx = window_positions(grid, window)
    if ny < 1 or nx < 1:
        return np.zeros(0, dtype=np.float32)
    view = np.lib.stride_tricks.sliding_window_view(grid.energy, (h, w))
    return view.reshape(ny * nx, w * h).mean(axis=1)


@dataclass
class _ImageWindows:
    """Cached per-scale window matrices for one image."""

    ref: str
    scales: list[tuple[int, np.ndarray, np.ndarray]]  # (level, xy, mat)


def _prepare_windows(refs: list[str], grids: list[list[HogGrid]],
                     window: tuple[int, int]) -> list[_ImageWindows]:
    out = []
    for ref, pyramid in zip(refs, grids):
        scales = []
        for level, grid in enumerate(pyramid):
            xy, mat = window_matrix(grid, window)
            if len(xy):
                scales.append((level, xy, mat))
        out.append(_ImageWindows(ref=ref, scales=scales))
    return out


# ---------------------------------------------------------------------------
# Seeds and clusters
# ---------------------------------------------------------------------------

def sample_seeds(images: dict[str, list[HogGrid]], per_image: int,
                 window: tuple[int, int], seed: int,
                 min_energy: float = MiningParams.min_energy,
                 ) -> list[PatchCandidate]:
    """Random window candidates from every image at every usable scale.

    Near-uniform windows (mean cell gradient energy below ``min_energy``)
    are rejected.  Raises MiningError when no grid can host the window.
    """
    w, h = window
    candidates: list[PatchCandidate] = []
    any_fit = False
    for ref in sorted(images):
        for level, grid in enumerate(images[ref]):
            ny, nx = window_positions(grid, window)
            if ny < 1 or nx < 1:
                continue
            any_fit = True
            n_pos = ny * nx
            rng = np.random.default_rng([seed, _ref_key(ref), level])
            take = min(per_image, n_pos)
            picks = rng.choice(n_pos, size=take, replace=False)
            energy = window_energy(grid, window)
            for p in sorted(int(v) for v in picks):
                if energy[p] < min_energy:
                    continue
                y, x = divmod(p, nx)
                desc = np.ascontiguousarray(
                    grid.data[y:y + h, x:x + w, :].ravel(), dtype=np.float32)
                candidates.append(PatchCandidate(
                    image_ref=ref, scale_level=level,
                    cell_rect=(x, y, w, h), descriptor=desc))
    if not any_fit:
        raise MiningError(f"no grid can host a {w}x{h}-cell window")
    return candidates


def _ref_key(ref: str) -> int:
    # stable 63-bit key so per-image RNG streams don't depend on list order
    key = 0
    for b in ref.encode("utf-8"):
        key = (key * 131 + b) % (2 ** 63 - 1)
    return key


def cluster_candidates(candidates: list[PatchCandidate], k: int,
                       seed: int) -> list[list[int]]:
    """k-means over candidate descriptors; empty and singleton clusters
    are dropped (a singleton cannot be cross-validated)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(candidates):
        raise ValueError(f"k={k} exceeds {len(candidates)} candidates")
    X = np.stack([c.descriptor for c in candidates])
    _, labels = kmeans(X, k, seed)
    clusters = []
    for j in range(k):
        members = np.flatnonzero(labels == j)
        if len(members) >= 2:
            clusters.append([int(i) for i in members])
    return clusters


# ---------------------------------------------------------------------------
# Detector training
# ---------------------------------------------------------------------------

def train_detector(positives: np.ndarray, negatives: np.ndarray,
                   regularization: float = MiningParams.detector_c,
                   class_id: int = 0,
                   window: tuple[int, int] | None = None,
                   fire_threshold: float = DEFAULT_FIRE_THRESHOLD,
                   random_state: int = 0) -> PatchDetector:
    """Linear max-margin detector: score = weights . descriptor + bias."""
    pos = np.asarray(positives, dtype=np.float64)
    neg = np.asarray(negatives, dtype=np.float64)
    if len(pos) < 2 or len(neg) < 2:
        raise ValueError("need at least 2 positives and 2 negatives")
    if pos.shape[1] != neg.shape[1]:
        raise ValueError("positive/negative descriptor lengths differ")
    upos = np.unique(pos, axis=0)
    uneg = np.unique(neg, axis=0)
    if upos.shape == uneg.shape and np.array_equal(upos, uneg):
        raise DegenerateClusterError("positive set equals negative set")

    X = np.vstack([pos, neg])
    y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
    svc = LinearSVC(C=regularization, loss="hinge", dual=True, tol=1e-4,
                    max_iter=5000, random_state=random_state)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        svc.fit(X, y)
    # liblinear orders classes [-1, +1]; coef_ already scores the +1 side
    if window is None:
        side = int(round((pos.shape[1] / CELL_DESC_LEN) ** 0.5))
        window = (side, side)
    return PatchDetector(weights=svc.coef_[0], bias=float(svc.intercept_[0]),
                         class_id=class_id, window=window,
                         fire_threshold=fire_threshold)


# ---------------------------------------------------------------------------
# Detection on grids (mining-time, all scales)
# ---------------------------------------------------------------------------

@dataclass
class _Firing:
    image_idx: int
    scale_level: int
    x: int
    y: int
    score: float
    descriptor: np.ndarray


def _nms(xy: np.ndarray, scores: np.ndarray, window: tuple[int, int],
         keep: int, max_overlap: float) -> list[int]:
    """Greedy same-size-rect NMS; returns indices into xy in score order."""
    w, h = window
    order = np.argsort(-scores, kind="stable")
    kept: list[int] = []
    for idx in order:
        x, y = xy[idx]
        ok = True
        for j in kept:
            dx = abs(int(x) - int(xy[j][0]))
            dy = abs(int(y) - int(xy[j][1]))
            inter = max(0, w - dx) * max(0, h - dy)
            iou = inter / (2.0 * w * h - inter)
            if iou > max_overlap:
                ok = False
                break
        if ok:
            kept.append(int(idx))
            if len(kept) >= keep:
                break
    return kept


def _detect_on_images(weights: np.ndarray, biases: np.ndarray,
                      images: list[_ImageWindows], window: tuple[int, int],
                      params: MiningParams) -> list[list[_Firing]]:
    """Per-detector firing lists over ``images`` at all usable scales.

    Scores above ``fire_threshold`` survive per-image NMS; at most
    ``per_image_top`` firings per detector per image are kept.
    """
    n_det = len(weights)
    firings: list[list[_Firing]] = [[] for _ in range(n_det)]
    for img_idx, img in enumerate(images):
        per_det: list[list[tuple[np.ndarray, np.ndarray, int, np.ndarray]]] = \
            [[] for _ in range(n_det)]
        for level, xy, mat in img.scales:
            scores = mat @ weights.T + biases  # (N, n_det) float32
            hits = scores > params.fire_threshold
            for d in np.flatnonzero(hits.any(axis=0)):
                rows = np.flatnonzero(hits[:, d])
                per_det[d].append((xy[rows], scores[rows, d], level, mat[rows]))
        for d in range(n_det):
            for xy_h, sc_h, level, mat_h in per_det[d]:
                for i in _nms(xy_h, sc_h, window, params.per_image_top,
                              params.nms_overlap):
                    firings[d].append(_Firing(
                        image_idx=img_idx, scale_level=level,
                        x=int(xy_h[i][0]), y=int(xy_h[i][1]),
                        score=float(sc_h[i]), descriptor=mat_h[i]))
    for f in firings:
        f.sort(key=lambda fr: -fr.score)
    return firings


# ---------------------------------------------------------------------------
# Ranking
# ---------------------------------------------------------------------------

def rank_score(firings: list[tuple[float, bool]],
               top_r: int = MiningParams.rank_top_r,
               discrim_weight: float = MiningParams.rank_lambda) -> float:
    """purity + lambda * discriminativeness over the top-r firings.

    ``firings`` holds (score, on_class_image) pairs.  Purity is the mean
    score of the top-r firings that land on class images;
    discriminativeness is one minus the fraction of top-r firings landing
    elsewhere.  No class firing in the top-r yields -inf, dropping the
    cluster.
    """
    if not firings:
        return float("-inf")
    top = sorted(firings, key=lambda f: -f[0])[:top_r]
    class_scores = [s for s, on_class in top if on_class]
    if not class_scores:
        return float("-inf")
    purity = sum(class_scores) / len(class_scores)
    discrim = 1.0 - (len(top) - len(class_scores)) / len(top)
    return purity + discrim_weight * discrim


def select_top(ranked: list[PatchDetector], limit: int = 210
               ) -> list[PatchDetector]:
    """First ``min(limit, len(ranked))`` detectors of a ranked list."""
    if not ranked:
        warnings.warn("empty ranked detector list; bank slot stays empty")
    return list(ranked[:limit])


# ---------------------------------------------------------------------------
# Per-class mining loop
# ---------------------------------------------------------------------------

def mine_class(class_id: int, refs: list[str], grids: list[list[HogGrid]],
               negative_grids: list[list[list[HogGrid]]],
               rounds: int, seed: int,
               params: MiningParams = MiningParams()) -> list[PatchDetector]:
    """Mine one class; returns detectors ranked best-first (not truncated).

    ``grids`` holds one HOG pyramid per training image of the class;
    ``negative_grids`` one list of pyramids per other class.  The class
    images are split into two disjoint halves that alternate between
    training and validation across rounds.
    """
    if len(refs) < 4:
        raise MiningError(f"class {class_id} has {len(refs)} images; need >= 4")
    window = (params.window_cells, params.window_cells)
    ss = np.random.SeedSequence([seed, class_id])
    child = [int(s.generate_state(1)[0]) for s in ss.spawn(6)]

    perm = np.random.default_rng(child[0]).permutation(len(refs))
    half_a = [int(i) for i in perm[:len(refs) // 2]]
    half_b = [int(i) for i in perm[len(refs) // 2:]]

    seeds = sample_seeds({refs[i]: grids[i] for i in half_a}, params.per_image,
                         window, child[1], params.min_energy)
    if len(seeds) < 2:
        return []
    k = max(params.k_floor, len(seeds) // params.k_divisor)
    k = min(k, len(seeds))
    clusters = cluster_candidates(seeds, k, child[2])
    members = [np.stack([seeds[i].descriptor for i in c]) for c in clusters]

    neg_train = _sample_negative_windows(negative_grids, window, child[3], params)
    if len(neg_train) < 2:
        raise MiningError("not enough negative windows")
    rank_negs = _pick_rank_negatives(negative_grids, window, child[4], params)

    train_idx, val_idx = half_a, half_b
    all_windows = _prepare_windows(refs, grids, window)
    passes = max(1, rounds)
    detectors: list[PatchDetector] = []
    class_firings: list[list[_Firing]] = []
    neg_firings: list[list[_Firing]] = []
    for pass_i in range(passes):
        detectors = []
        surviving: list[np.ndarray] = []
        for mi, mem in enumerate(members):
            if len(mem) < 2:
                continue
            try:
                det = train_detector(mem, neg_train, params.detector_c,
                                     class_id, window, params.fire_threshold,
                                     random_state=child[5] % (2 ** 31))
            except DegenerateClusterError:
                continue
            detectors.append(det)
            surviving.append(mem)
        if not detectors:
            return []
        weights = np.stack([d.weights for d in detectors])
        biases = np.array([d.bias for d in detectors], dtype=np.float32)
        val_windows = [all_windows[i] for i in val_idx]
        class_firings = _detect_on_images(weights, biases, val_windows,
                                          window, params)
        neg_firings = _detect_on_images(weights, biases, rank_negs,
                                        window, params)
        if pass_i < passes - 1:
            members = []
            for fs in class_firings:
                top = fs[:params.refine_top]
                if len(top) >= params.min_members:
                    members.append(np.stack([f.descriptor for f in top]))
            if not members:
                return []
            train_idx, val_idx = val_idx, train_idx

    ranked: list[tuple[float, int, PatchDetector]] = []
    for d, det in enumerate(detectors):
        fired_images = {f.image_idx for f in class_firings[d]}
        if len(fired_images) < min(params.min_fired_images, len(val_idx)):
            continue
        table = [(f.score, True) for f in class_firings[d]]
        table += [(f.score, False) for f in neg_firings[d]]
        score = rank_score(table, params.rank_top_r, params.rank_lambda)
        if score == float("-inf"):
            continue
        ranked.append((score, d, det))
    ranked.sort(key=lambda t: (-t[0], t[1]))
    return [det for _, _, det in ranked]


def _sample_negative_windows(negative_grids: list[list[list[HogGrid]]],
                             window: tuple[int, int], seed: int,
                             params: MiningParams) -> np.ndarray:
    """Fixed seeded negative-window sample: a few images per other class."""
    rng = np.random.default_rng(seed)
    descs = []
    for gi, per_class in enumerate(negative_grids):
        if not per_class:
            continue
        n = min(params.neg_images_per_class, len(per_class))
        picks = rng.choice(len(per_class), size=n, replace=False)
        imgs = {f"neg{gi}_{int(i)}": per_class[int(i)] for i in picks}
        cands = sample_seeds(imgs, params.neg_windows_per_image, window,
                             seed=int(rng.integers(2 ** 31)),
                             min_energy=params.min_energy)
        descs.extend(c.descriptor for c in cands)
    if not descs:
        return np.zeros((0, window[0] * window[1] * CELL_DESC_LEN), np.float32)
    return np.stack(descs)


def _pick_rank_negatives(negative_grids: list[list[list[HogGrid]]],
                         window: tuple[int, int], seed: int,
                         params: MiningParams) -> list[_ImageWindows]:
    """Held-out other-class images used only for ranking firings."""
    rng = np.random.default_rng(seed)
    out: list[_ImageWindows] = []
    for gi, per_class in enumerate(negative_grids):
        if not per_class:
            continue
        n = min(params.rank_neg_images_per_class, len(per_class))
        picks = rng.choice(len(per_class), size=n, replace=False)
        refs = [f"rank{gi}_{int(i)}" for i in picks]
        grids = [per_class[int(i)] for i in picks]
        out.extend(_prepare_windows(refs, grids, window))
    return out


# ---------------------------------------------------------------------------
# Bank assembly and serialization
# ---------------------------------------------------------------------------

def mine_bank(class_grids: list[list[list[HogGrid]]],
              class_refs: list[list[str]],
              seed: int, params: MiningParams = MiningParams()
              ) -> DetectorBank:
    """Mine every class and assemble the ranked detector bank.

    ``class_grids[c]`` holds the HOG pyramids of class ``c``'s training
    images, ``class_refs[c]`` their refs (for seeding stability).
    """
    num_classes = len(class_grids)
    per_class: list[list[PatchDetector]] = []
    for c in range(num_classes):
        negatives = [class_grids[o] for o in range(num_classes) if o != c]
        ranked = mine_class(c, class_refs[c], class_grids[c], negatives,
                            params.rounds, seed, params)
        per_class.append(select_top(ranked, params.top_k))
    return DetectorBank(detectors=per_class)


def save_bank(bank: DetectorBank, path: Path | str) -> None:
    """Versioned little-endian binary; round-trips bit-exactly."""
    with open(path, "wb") as fh:
        counts = [len(d) for d in bank.detectors]
        fh.write(BANK_MAGIC)
        fh.write(struct.pack("<II", BANK_VERSION, bank.num_classes))
        fh.write(struct.pack(f"<{len(counts)}I", *counts))
        for det in bank:
            fh.write(struct.pack("<IIIffI", det.class_id, det.window[0],
                                 det.window[1], det.bias, det.fire_threshold,
                                 len(det.weights)))
            fh.write(det.weights.astype("<f4").tobytes())


def load_bank(path: Path | str) -> DetectorBank:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != BANK_MAGIC:
            raise ValueError(f"not a detector bank file: magic {magic!r}")
        version, num_classes = struct.unpack("<II", fh.read(8))
        if version != BANK_VERSION:
            raise ValueError(f"unsupported bank version {version}")
        counts = struct.unpack(f"<{num_classes}I", fh.read(4 * num_classes))
        per_class: list[list[PatchDetector]] = [[] for _ in range(num_classes)]
        for c in range(num_classes):
            for _ in range(counts[c]):
                class_id, w, h, bias, thr, wlen = struct.unpack(
                    "<IIIffI", fh.read(24))
                weights = np.frombuffer(fh.read(4 * wlen), dtype="<f4").copy()
                per_class[c].append(PatchDetector(
                    weights=weights, bias=bias, class_id=class_id,
                    window=(w, h), fire_threshold=thr))
    return DetectorBank(detectors=per_class)
