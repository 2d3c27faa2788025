"""Catalog loading, synthetic desk-scale dataset generation, and splits.

On-disk layout::

    root/
      train/<class_name>/*.png      one directory per class, clean product shots
      test/*.png                    shelf composites
      test_manifest.csv             UTF-8 CSV: relative_path,class_name
      words.json                    optional: rendered words per training image

Class order is fixed lexicographically so feature-vector bins stay stable
across runs.  Test images are rescaled on load to a maximum height of
1080 pixels (aspect preserved); training images are never rescaled.
"""

from __future__ import annotations

import csv
import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

MAX_TEST_HEIGHT = 1080

MANIFEST_NAME = "test_manifest.csv"
WORDS_NAME = "words.json"

# Default synthetic class names; lexicographic load order applies anyway.
_DEFAULT_NAMES = [
    "bakery", "biscuits", "cereal", "chips", "chocolate", "coffee",
    "corn", "flour", "honey", "icetea", "jam", "juice", "milk", "nuts",
    "oil", "pasta", "rice", "sauces", "snacks", "softdrinks", "soups",
    "spices", "sugar", "tea", "water", "yoghurt",
]


class CatalogError(Exception):
    """Raised when the on-disk catalog layout is missing or inconsistent."""


@dataclass(frozen=True)
class WordBox:
    """A word rendered onto a training image, with its pixel box."""

    word: str
    box: tuple[int, int, int, int]  # x, y, w, h


@dataclass
class Catalog:
    """Train/test catalog with a deterministic lexicographic class order."""

    root: Path
    classes: list[str]
    train_images: dict[str, list[str]]          # class name -> relative paths
    test_images: list[tuple[str, int]]          # (relative path, class index)
    words: dict[str, list[WordBox]] = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def class_index(self, name: str) -> int:
        return self.classes.index(name)

    def load_train_image(self, ref: str) -> np.ndarray:
        """Decode a training image as RGB uint8, never rescaled."""
        return _read_rgb(self.root / ref)

    def load_test_image(self, ref: str) -> np.ndarray:
        """Decode a test image as RGB uint8, capped at 1080 px height."""
        img = _read_rgb(self.root / ref)
        h, w = img.shape[:2]
        if h > MAX_TEST_HEIGHT:
            nw = int(round(w * MAX_TEST_HEIGHT / h))
            img = cv2.resize(img, (nw, MAX_TEST_HEIGHT), interpolation=cv2.INTER_AREA)
        return img

    def save(self, dst: Path) -> None:
        """Re-serialize this catalog (images copied byte-for-byte) to ``dst``."""
        dst = Path(dst)
        for refs in self.train_images.values():
            for ref in refs:
                target = dst / ref
                target.parent.mkdir(parents=True, exist_ok=True)
                shutil.copyfile(self.root / ref, target)
        for ref, _ in self.test_images:
            target = dst / ref
            target.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(self.root / ref, target)
        _write_manifest(dst / MANIFEST_NAME,
                        [(ref, self.classes[idx]) for ref, idx in self.test_images])
        if self.words:
            _write_words(dst / WORDS_NAME, self.words)


@dataclass(frozen=True)
class SplitSpec:
    """Learning/testing split protocol for the active-learning experiments."""

    learning_size: int
    testing_size: int
    step: int
    runs: int
    seed: int

    def validate(self, total_test_images: int) -> None:
        if self.learning_size < 0 or self.testing_size < 0:
            raise ValueError("split sizes must be non-negative")
        if self.learning_size + self.testing_size > total_test_images:
            raise ValueError(
                f"learning_size + testing_size = "
                f"{self.learning_size + self.testing_size} exceeds the "
                f"{total_test_images} available test images")
        if self.step < 1:
            raise ValueError("step must be >= 1")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")


def _read_rgb(path: Path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise CatalogError(f"image not decodable: {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def _write_manifest(path: Path, rows: list[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["relative_path", "class_name"])
        writer.writerows(rows)


def _write_words(path: Path, words: dict[str, list[WordBox]]) -> None:
    payload = {
        ref: [{"word": wb.word, "box": list(wb.box)} for wb in boxes]
        for ref, boxes in sorted(words.items())
    }
    path.write_text(json.dumps(payload, indent=1, sort_keys=True), encoding="utf-8")


def _read_words(path: Path) -> dict[str, list[WordBox]]:
    payload = json.loads(path.read_text(encoding="utf-8"))
    return {
        ref: [WordBox(e["word"], tuple(e["box"])) for e in entries]
        for ref, entries in payload.items()
    }


def load_catalog(root: Path | str) -> Catalog:
    """Load and validate a catalog from ``root``.

    Every referenced image is decoded once to enforce the decodability
    invariant.  Raises CatalogError for a missing manifest or for a
    manifest class with no training directory, naming the class.
    """
    root = Path(root)
    train_dir = root / "train"
    if not train_dir.is_dir():
        raise CatalogError(f"missing train/ directory under {root}")
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise CatalogError(f"missing test manifest: {manifest}")

    classes = sorted(p.name for p in train_dir.iterdir() if p.is_dir())
    if not classes:
        raise CatalogError(f"no class directories under {train_dir}")
    train_images: dict[str, list[str]] = {}
    for name in classes:
        refs = sorted(
            str(p.relative_to(root))
            for p in (train_dir / name).iterdir()
            if p.suffix.lower() in (".png", ".jpg", ".jpeg")
        )
        train_images[name] = refs

    test_images: list[tuple[str, int]] = []
    with open(manifest, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        for row in reader:
            if not row or row[0] == "relative_path":
                continue
            ref, cls = row[0], row[1]
            if cls not in train_images:
                raise CatalogError(
                    f"manifest names class {cls!r} with no train/{cls} directory")
            test_images.append((ref, classes.index(cls)))

    words: dict[str, list[WordBox]] = {}
    words_path = root / WORDS_NAME
    if words_path.is_file():
        words = _read_words(words_path)

    catalog = Catalog(root=root, classes=classes, train_images=train_images,
                      test_images=test_images, words=words)
    for refs in train_images.values():
        for ref in refs:
            _read_rgb(root / ref)
    for ref, _ in test_images:
        _read_rgb(root / ref)
    return catalog


def split_for_learning(catalog: Catalog, spec: SplitSpec,
                       run: int) -> tuple[list[str], list[str]]:
    """Disjoint (learning, testing) image refs for one protocol run.

    Deterministic given ``(spec.seed, run)``; learning and testing are
    drawn without replacement from the catalog's test images.
    """
    if run >= spec.runs:
        raise ValueError(f"run {run} out of range for {spec.runs} runs")
    spec.validate(len(catalog.test_images))
    rng = np.random.default_rng([spec.seed, run])
    perm = rng.permutation(len(catalog.test_images))
    learn = [catalog.test_images[i][0] for i in perm[:spec.learning_size]]
    test = [catalog.test_images[i][0]
            for i in perm[spec.learning_size:spec.learning_size + spec.testing_size]]
    return learn, test


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------

_GLYPH_CHARS = "ABCDEFGHJKLMNPQRSTUVWXYZ"
_ACCENTS = ("ring", "box", "cross", "diag", "dots")


@dataclass(frozen=True)
class _Motif:
    """Visual identity of one synthetic class."""

    char: str
    accent: str
    ink: float
    background: float


def _class_motifs(num_classes: int, seed: int) -> list[_Motif]:
    rng = np.random.default_rng([seed, 0xC1A55])
    chars = rng.permutation(list(_GLYPH_CHARS))
    motifs = []
    for i in range(num_classes):
        char = chars[i % len(chars)]
        accent = _ACCENTS[int(rng.integers(len(_ACCENTS)))]
        ink = 0.05 + 0.10 * rng.random()
        background = 0.82 + 0.08 * rng.random()
        motifs.append(_Motif(str(char), accent, float(ink), float(background)))
    return motifs


def _stamp_accent(canvas: np.ndarray, ink: int, accent: str,
                  center: np.ndarray, scale: float = 1.0) -> None:
    cx, cy = int(center[0]), int(center[1])
    r = max(3, int(8 * scale))
    if accent == "ring":
        cv2.circle(canvas, (cx, cy), r, ink, 2)
        cv2.circle(canvas, (cx, cy), max(1, r // 2), ink, -1)
    elif accent == "box":
        cv2.rectangle(canvas, (cx - r, cy - r), (cx + r, cy + r), ink, 2)
    elif accent == "cross":
        cv2.line(canvas, (cx - r, cy), (cx + r, cy), ink, 3)
        cv2.line(canvas, (cx, cy - r), (cx, cy + r), ink, 3)
    elif accent == "diag":
        cv2.line(canvas, (cx - r, cy - r), (cx + r, cy + r), ink, 3)
        cv2.line(canvas, (cx - r, cy + r), (cx + r, cy - r), ink, 2)
    else:  # dots
        for k in range(3):
            cv2.circle(canvas, (cx - r + k * r, cy), max(2, r // 3), ink, -1)


def _stamp_logo(canvas: np.ndarray, ink: int, cx: int, cy: int,
                scale: float = 1.0) -> None:
    """Shared-logo pattern stamped identically on the classes that carry it."""
    r = max(6, int(16 * scale))
    cv2.circle(canvas, (cx, cy), r, ink, 2)
    pts = np.array([[cx, cy - r + 3], [cx - r + 3, cy + r - 4],
                    [cx + r - 3, cy + r - 4]])
    cv2.fillPoly(canvas, [pts], ink)


def _stamp_motif(canvas: np.ndarray, motif: _Motif, ink: int,
                 cx: int, cy: int, scale: float,
                 rng: np.random.Generator) -> None:
    """One motif instance (glyph + accent) centered near (cx, cy)."""
    jx, jy = (int(v) for v in rng.integers(-2, 3, size=2))
    glyph_scale = 1.15 * scale * float(rng.uniform(0.96, 1.04))
    origin = (cx - int(14 * scale) + jx, cy + int(12 * scale) + jy)
    cv2.putText(canvas, motif.char, origin, cv2.FONT_HERSHEY_SIMPLEX,
                glyph_scale, ink, max(2, int(2 * scale)), cv2.LINE_8)
    _stamp_accent(canvas, ink, motif.accent,
                  np.array([cx + int(10 * scale), cy - int(10 * scale)]), scale)


def _render_product(motif: _Motif, size: int, rng: np.random.Generator,
                    words: list[str] | None = None,
                    shared_logo: bool = False,
                    noise: float = 0.01) -> tuple[np.ndarray, list[WordBox]]:
    """One clean product shot (uint8 gray) plus any rendered word boxes.

    Packaging style: the class motif repeats in a 2x2 arrangement so any
    local window of the product sees a full motif instance, the way
    brand elements repeat on real packaging.
    """
    ink = int(round(motif.ink * 255)) + int(rng.integers(-5, 6))
    base = np.full((size, size), motif.background, dtype=np.float32)
    base += rng.normal(0.0, noise, base.shape).astype(np.float32)
    canvas = np.clip(np.rint(base * 255.0), 0, 255).astype(np.uint8)
    # package border
    cv2.rectangle(canvas, (2, 2), (size - 3, size - 3), ink + 64, 1)

    scale = size / 96.0
    q = size // 4
    centers = [(q, q), (3 * q, q), (q, 3 * q), (3 * q, 3 * q)]
    for i, (cx, cy) in enumerate(centers):
        if shared_logo and i == 3:
            _stamp_logo(canvas, ink, cx, cy, scale)
        else:
            _stamp_motif(canvas, motif, ink, cx, cy, scale, rng)

    boxes: list[WordBox] = []
    if words:
        y = size - 6
        for word in words:
            (tw, th), baseline = cv2.getTextSize(word, cv2.FONT_HERSHEY_SIMPLEX,
                                                 0.45 * scale, 1)
            x = max(4, (size - tw) // 2)
            cv2.putText(canvas, word, (x, y), cv2.FONT_HERSHEY_SIMPLEX,
                        0.45 * scale, ink, 1, cv2.LINE_8)
            boxes.append(WordBox(word, (x, y - th - baseline, tw, th + baseline + 2)))
            y -= th + baseline + 6
    return canvas, boxes


def _render_composite(motif: _Motif, size: int, canvas_hw: tuple[int, int],
                      n_products: int, rng: np.random.Generator,
                      shared_logo: bool, domain_shift: float) -> np.ndarray:
    """Shelf composite of ``n_products`` same-class renderings, degraded."""
    h, w = canvas_hw
    bg = int(round(255 * (0.55 - 0.10 * domain_shift)))
    canvas = np.full((h, w), bg, dtype=np.uint8)
    # shelf boards
    slot = size + 10
    rows = max(1, (h - 16) // slot)
    cols = max(1, (w - 16) // slot)
    for r in range(rows + 1):
        y = min(h - 3, 8 + r * slot + size + 2)
        cv2.rectangle(canvas, (0, y), (w, y + 4), 76, -1)

    slots = [(r, c) for r in range(rows) for c in range(cols)]
    picks = rng.permutation(len(slots))[:n_products]
    for p in picks:
        r, c = slots[int(p)]
        prod, _ = _render_product(motif, size, rng, shared_logo=shared_logo,
                                  noise=0.01)
        y0 = 8 + r * slot + int(rng.integers(-3, 4))
        x0 = 8 + c * slot + int(rng.integers(-3, 4))
        y0 = int(np.clip(y0, 0, h - size))
        x0 = int(np.clip(x0, 0, w - size))
        canvas[y0:y0 + size, x0:x0 + size] = prod

    # price tags partially occluding products
    n_tags = max(1, n_products // 4)
    for _ in range(n_tags):
        tx = int(rng.integers(0, max(1, w - 30)))
        ty = int(rng.integers(0, max(1, h - 16)))
        cv2.rectangle(canvas, (tx, ty), (tx + 28, ty + 14), 242, -1)
        cv2.rectangle(canvas, (tx, ty), (tx + 28, ty + 14), 38, 1)

    sigma = 0.35 + 0.9 * domain_shift
    out = cv2.GaussianBlur(canvas, (0, 0), sigma).astype(np.float32)
    out += 255.0 * rng.normal(0.0, 0.015 + 0.05 * domain_shift,
                              out.shape).astype(np.float32)
    if domain_shift > 0:
        yy = np.linspace(-1, 1, h, dtype=np.float32)[:, None]
        xx = np.linspace(-1, 1, w, dtype=np.float32)[None, :]
        out -= 255.0 * 0.08 * domain_shift * (xx ** 2 + yy ** 2)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _write_png(path: Path, image: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), image):
        raise CatalogError(f"failed to write {path}")


def generate_synthetic(num_classes: int, per_class: int, shelf_images: int,
                       seed: int, out_dir: Path | str,
                       class_names: list[str] | None = None,
                       product_size: int = 96,
                       products_range: tuple[int, int] = (6, 12),
                       domain_shift: float = 0.0,
                       shared_logo_classes: tuple[int, int] | None = None,
                       word_plan: dict[str, list[tuple[str, int]]] | None = None,
                       ) -> Catalog:
    """Generate a synthetic desk-scale catalog under ``out_dir``.

    Each class is defined by a distinctive glyph motif; training images
    are single clean products and test images are same-class shelf
    composites with noise, blur, and partial occlusion.  Deterministic
    given the arguments: the training side depends only on
    ``(num_classes, per_class, seed)``, so catalogs differing only in
    their test parameters share byte-identical training images.

    ``shared_logo_classes`` stamps one identical logo pattern on every
    product of the two named class indices.  ``word_plan`` maps a class
    name to ``(word, n_images)`` quotas; the word is rendered onto the
    first ``n_images`` training images of the class and recorded in the
    words sidecar.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if per_class < 5:
        raise ValueError("per_class must be >= 5")
    out_dir = Path(out_dir)
    if class_names is None:
        class_names = [_DEFAULT_NAMES[i % len(_DEFAULT_NAMES)] +
                       ("" if i < len(_DEFAULT_NAMES) else str(i))
                       for i in range(num_classes)]
    if len(set(class_names)) != num_classes:
        raise ValueError("class names must be unique")
    order = sorted(range(num_classes), key=lambda i: class_names[i])

    motifs = _class_motifs(num_classes, seed)
    logo = set(shared_logo_classes) if shared_logo_classes else set()
    word_plan = word_plan or {}

    words: dict[str, list[WordBox]] = {}
    test_rows: list[tuple[str, str]] = []

    for ci in order:
        name = class_names[ci]
        quotas = list(word_plan.get(name, []))
        for j in range(per_class):
            rng = np.random.default_rng([seed, 1, ci, j])
            image_words = [w for w, n in quotas if j < n]
            img, boxes = _render_product(motifs[ci], product_size, rng,
                                         words=image_words,
                                         shared_logo=ci in logo)
            ref = f"train/{name}/prod_{j:03d}.png"
            _write_png(out_dir / ref, img)
            if boxes:
                words[ref] = boxes

    lo, hi = products_range
    if lo < 1 or hi < lo:
        raise ValueError("invalid products_range")
    slot = product_size + 10
    canvas_hw = (3 * slot + 26, 4 * slot + 26)
    for t in range(shelf_images):
        ci = order[t % num_classes]
        rng = np.random.default_rng([seed, 2, t])
        n_products = int(rng.integers(lo, hi + 1))
        img = _render_composite(motifs[ci], product_size, canvas_hw, n_products,
                                rng, shared_logo=ci in logo,
                                domain_shift=domain_shift)
        ref = f"test/shelf_{t:04d}.png"
        _write_png(out_dir / ref, img)
        test_rows.append((ref, class_names[ci]))

    _write_manifest(out_dir / MANIFEST_NAME, test_rows)
    if words:
        _write_words(out_dir / WORDS_NAME, words)
    return load_catalog(out_dir)
