"""Detector-bank evaluation and two-step max-pooled feature vectors.

Each image becomes a histogram with one bin per class: the best window
score of the best detector of that class (max over windows, then max
over the class's detectors).  Pyramid mode appends the same pooling
restricted to the four image quadrants, giving ``5 * L`` values ordered
[whole, top-left, top-right, bottom-left, bottom-right].

Classes with no firing sit at the fire threshold (-1.5), keeping "no
evidence" below every retained score.  Detection at encoding time runs
at a single scale; the multi-scale pass belongs to mining only.
"""

from __future__ import annotations

import csv
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imagecore import CELL_SIZE, CELL_STRIDE, compute_hog
from .patchmine import DetectorBank, window_matrix

REGION_NAMES = ("whole", "TL", "TR", "BL", "BR")

_DETECTOR_CHUNK = 64  # fixed chunk size so worker count cannot change results


@dataclass(frozen=True)
class Detection:
    detector_index: int            # flat index in bank iteration order
    class_id: int
    score: float
    rect: tuple[int, int, int, int]   # x, y, w, h in pixels
    center: tuple[float, float]


@dataclass(frozen=True)
class FeatureVector:
    """Max-pooled per-class scores; length L or 5L depending on mode."""

    values: np.ndarray
    pyramid: bool

    def __post_init__(self):
        object.__setattr__(self, "values",
                           np.ascontiguousarray(self.values, dtype=np.float32))
        L = self.num_classes
        expect = 5 * L if self.pyramid else L
        if len(self.values) != expect or L < 1:
            raise ValueError(f"feature length {len(self.values)} does not "
                             f"match mode (pyramid={self.pyramid})")

    @property
    def num_classes(self) -> int:
        n = len(self.values)
        return n // 5 if self.pyramid else n


def _bank_floor(bank: DetectorBank) -> float:
    thresholds = {det.fire_threshold for det in bank}
    if not thresholds:
        raise ValueError("empty detector bank")
    if len(thresholds) > 1:
        raise ValueError("mixed fire thresholds in one bank are not supported")
    return thresholds.pop()


def _window_geometry(xy: np.ndarray, window: tuple[int, int], scale: float
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Pixel rects and centers for window placements at a pyramid scale."""
    w, h = window
    px = xy[:, 0] * CELL_STRIDE / scale
    py = xy[:, 1] * CELL_STRIDE / scale
    pw = w * CELL_SIZE / scale
    ph = h * CELL_SIZE / scale
    rects = np.stack([px, py, np.full(len(xy), pw), np.full(len(xy), ph)], axis=1)
    centers = np.stack([px + pw / 2.0, py + ph / 2.0], axis=1)
    return rects, centers


def _score_blocks(image: np.ndarray, bank: DetectorBank, workers: int = 1):
    """Raw window scores for every detector at scale 0.

    Yields ``(window, block, xy, scores)`` per window-size group, where
    scores is ``(n_windows, n_detectors)`` float32.  Scoring is chunked
    over detectors with a fixed chunk size; ``workers`` only parallelizes
    the chunks, so results are identical for any worker count.
    """
    grid = compute_hog(image)
    for window, block in bank.weight_blocks().items():
        xy, mat = window_matrix(grid, window)
        if len(xy) == 0:
            warnings.warn(f"image {image.shape} smaller than {window} "
                          f"detector window; no detections")
            yield window, block, xy, np.zeros((0, len(block["weights"])), np.float32)
            continue
        W = block["weights"]
        chunks = [(s, min(s + _DETECTOR_CHUNK, len(W)))
                  for s in range(0, len(W), _DETECTOR_CHUNK)]

        def run(bounds):
            s, e = bounds
            return mat @ W[s:e].T + block["biases"][s:e]

        if workers > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(run, chunks))
        else:
            parts = [run(c) for c in chunks]
        yield window, block, xy, np.concatenate(parts, axis=1)


def detect_all(image: np.ndarray, bank: DetectorBank,
               workers: int = 1) -> list[Detection]:
    """All whole-image detections above each detector's fire threshold.

    Deterministic and independent of ``workers``; detections come back
    ordered by flat detector index, then window position.
    """
    if bank.total() == 0:
        raise ValueError("empty detector bank")
    out: list[Detection] = []
    for window, block, xy, scores in _score_blocks(image, bank, workers):
        if len(xy) == 0:
            continue
        rects, centers = _window_geometry(xy, window, 1.0)
        hits = scores > block["thresholds"][None, :]
        for col in np.flatnonzero(hits.any(axis=0)):
            det_flat = int(block["indices"][col])
            class_id = int(block["class_ids"][col])
            for r in np.flatnonzero(hits[:, col]):
                x, y, w, h = rects[r]
                out.append(Detection(
                    detector_index=det_flat, class_id=class_id,
                    score=float(scores[r, col]),
                    rect=(int(x), int(y), int(w), int(h)),
                    center=(float(centers[r][0]), float(centers[r][1]))))
    out.sort(key=lambda d: (d.detector_index, d.rect[1], d.rect[0]))
    return out


def _region_of(center: tuple[float, float], image_hw: tuple[int, int]) -> int:
    """Quadrant region index (1..4) of a detection center; [whole]=0."""
    h, w = image_hw
    right = 1 if center[0] >= w / 2.0 else 0
    bottom = 2 if center[1] >= h / 2.0 else 0
    return 1 + right + bottom


def pool_detections(detections: list[Detection], num_classes: int,
                    pyramid: bool, image_hw: tuple[int, int],
                    floor: float = -1.5) -> FeatureVector:
    """Fold a detection list into a feature vector (two-step max pooling).

    This is the reference semantics of :func:`encode`: order-independent,
    monotone in added detections, and floored at ``floor`` for classes
    with no firing in a region.
    """
    n = 5 * num_classes if pyramid else num_classes
    values = np.full(n, floor, dtype=np.float32)
    for det in detections:
        c = det.class_id
        score = np.float32(det.score)
        if score > values[c]:
            values[c] = score
        if pyramid:
            slot = _region_of(det.center, image_hw) * num_classes + c
            if score > values[slot]:
                values[slot] = score
    return FeatureVector(values=values, pyramid=pyramid)


def encode(image: np.ndarray, bank: DetectorBank, pyramid: bool = False,
           workers: int = 1) -> FeatureVector:
    """Two-step max-pooled feature vector of ``image`` under ``bank``.

    Equivalent to ``pool_detections(detect_all(image, bank), ...)`` but
    pools directly from the window-score matrices.
    """
    if bank.total() == 0:
        raise ValueError("empty detector bank")
    floor = _bank_floor(bank)
    L = bank.num_classes
    n = 5 * L if pyramid else L
    values = np.full(n, floor, dtype=np.float32)
    image_hw = image.shape[:2]
    for window, block, xy, scores in _score_blocks(image, bank, workers):
        if len(xy) == 0:
            continue
        masked = np.where(scores > block["thresholds"][None, :],
                          scores, np.float32(-np.inf))
        class_ids = block["class_ids"]
        col_max = masked.max(axis=0)
        for col in np.flatnonzero(col_max > -np.inf):
            c = class_ids[col]
            if col_max[col] > values[c]:
                values[c] = col_max[col]
        if pyramid:
            _, centers = _window_geometry(xy, window, 1.0)
            regions = np.fromiter(
                (_region_of((cx, cy), image_hw) for cx, cy in centers),
                dtype=np.int64, count=len(centers))
            for q in (1, 2, 3, 4):
                rows = regions == q
                if not rows.any():
                    continue
                q_max = masked[rows].max(axis=0)
                for col in np.flatnonzero(q_max > -np.inf):
                    slot = q * L + class_ids[col]
                    if q_max[col] > values[slot]:
                        values[slot] = q_max[col]
    return FeatureVector(values=values, pyramid=pyramid)


def highest_score_class(vector: FeatureVector) -> int | None:
    """Class of the best-scoring patch; None when nothing fired.

    In pyramid mode a class scores by its best bin across all five
    regions.  A vector whose bins are all equal carries no evidence (the
    all-at-floor case, shifted or not) and yields None; otherwise ties
    break toward the lower class index.
    """
    if np.all(vector.values == vector.values[0]):
        return None
    L = vector.num_classes
    if vector.pyramid:
        per_class = vector.values.reshape(5, L).max(axis=0)
    else:
        per_class = vector.values
    return int(per_class.argmax())


def stack_features(vectors: list[FeatureVector]) -> np.ndarray:
    """Stack feature vectors into an (n, dim) float32 design matrix."""
    if not vectors:
        raise ValueError("no feature vectors")
    modes = {v.pyramid for v in vectors}
    if len(modes) > 1:
        raise ValueError("cannot stack mixed whole-image and pyramid vectors")
    return np.stack([v.values for v in vectors])


def export_features_csv(path: Path | str, refs: list[str],
                        vectors: list[FeatureVector]) -> None:
    """Write feature vectors as CSV rows: image ref, mode, values..."""
    if len(refs) != len(vectors):
        raise ValueError("refs and vectors length mismatch")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        for ref, vec in zip(refs, vectors):
            mode = "pyramid" if vec.pyramid else "whole"
            writer.writerow([ref, mode] + [repr(float(v)) for v in vec.values])
