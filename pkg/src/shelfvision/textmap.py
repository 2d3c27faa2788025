"""Packaging-text pipeline: score-map segmentation, word histograms, and
word-to-class queries for the shopping list.

The per-pixel text scorer and the OCR engine are pluggable adapters.
The shipped scorer is a deterministic gradient-density heuristic with
scores calibrated to [0, 100] so the mask-out threshold of 10 is
meaningful; the shipped OCR is a synthetic lookup adapter that
recognizes words the dataset generator rendered and recorded.  Real
scorer or OCR plug-ins must document their own score scale.

Segmentation: mask scores above 10, dilate 6 times with a 3x3 element,
take 8-connected components, and drop components of 230 pixels or less
(measured after dilation).
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import cv2
import numpy as np
from scipy import ndimage

from .dataset import Catalog, WordBox
from .imagecore import to_grayscale

logger = logging.getLogger(__name__)

SCORE_THRESHOLD = 10.0
DILATION_ITERS = 6
MIN_REGION_AREA = 230

Rect = tuple[int, int, int, int]  # x, y, w, h in pixels

_EDGE_STRIP = re.compile(r"^[^0-9a-z]+|[^0-9a-z]+$")


def gradient_text_scorer(gray: np.ndarray) -> np.ndarray:
    """Default text/no-text scorer: local gradient density in [0, 100].

    Text strokes produce dense local gradients; smooth packaging and
    background stay near zero.  Deterministic, no learned parts.
    """
    img = np.asarray(gray, dtype=np.float32)
    padded = np.pad(img, 1, mode="edge")
    gx = np.abs(padded[1:-1, 2:] - padded[1:-1, :-2])
    gy = np.abs(padded[2:, 1:-1] - padded[:-2, 1:-1])
    density = cv2.blur(gx + gy, (9, 9))
    return np.clip(120.0 * density, 0.0, 100.0).astype(np.float32)


def segment_text_regions(scores: np.ndarray,
                         threshold: float = SCORE_THRESHOLD,
                         dilation_iters: int = DILATION_ITERS,
                         min_area: int = MIN_REGION_AREA) -> list[Rect]:
    """Bounding rectangles of text-like regions in a score map.

    Pixels scoring ``threshold`` or below are masked out; survivors are
    dilated ``dilation_iters`` times with a 3x3 structuring element;
    8-connected components with ``min_area`` pixels or fewer (after
    dilation) are discarded.
    """
    mask = np.asarray(scores) > threshold
    if not mask.any():
        return []
    struct = np.ones((3, 3), dtype=bool)
    if dilation_iters > 0:
        mask = ndimage.binary_dilation(mask, structure=struct,
                                       iterations=dilation_iters)
    labels, n = ndimage.label(mask, structure=struct)
    if n == 0:
        return []
    areas = np.bincount(labels.ravel())[1:]
    rects: list[Rect] = []
    for i, sl in enumerate(ndimage.find_objects(labels)):
        if sl is None or areas[i] <= min_area:
            continue
        ys, xs = sl
        rects.append((int(xs.start), int(ys.start),
                      int(xs.stop - xs.start), int(ys.stop - ys.start)))
    return rects


# ---------------------------------------------------------------------------
# OCR adapters
# ---------------------------------------------------------------------------

class OcrAdapter(Protocol):
    """Recognize the text inside one rectangle of an image."""

    def recognize(self, image: np.ndarray, region: Rect) -> str: ...

    def for_image(self, ref: str) -> "OcrAdapter": ...


class SyntheticOcr:
    """Lookup OCR over words the synthetic generator rendered.

    ``for_image`` binds the adapter to one image's recorded word boxes;
    ``recognize`` then returns every recorded word whose box is mostly
    covered by the queried region.  Parallel-safe: binding creates an
    independent view.
    """

    def __init__(self, words: dict[str, list[WordBox]],
                 boxes: list[WordBox] | None = None):
        self._words = words
        self._boxes = boxes or []

    @classmethod
    def from_catalog(cls, catalog: Catalog) -> "SyntheticOcr":
        return cls(catalog.words)

    def for_image(self, ref: str) -> "SyntheticOcr":
        return SyntheticOcr(self._words, self._words.get(ref, []))

    def recognize(self, image: np.ndarray, region: Rect) -> str:
        rx, ry, rw, rh = region
        found = []
        for wb in self._boxes:
            x, y, w, h = wb.box
            ix = max(0, min(x + w, rx + rw) - max(x, rx))
            iy = max(0, min(y + h, ry + rh) - max(y, ry))
            if w * h > 0 and (ix * iy) / (w * h) >= 0.5:
                found.append((y, x, wb.word))
        return " ".join(word for _, _, word in sorted(found))


def recognize_words(image: np.ndarray, regions: list[Rect],
                    ocr: OcrAdapter) -> list[str]:
    """One recognized string per region; adapter failures on a region
    yield an empty string instead of failing the batch."""
    if ocr is None or not hasattr(ocr, "recognize"):
        raise ValueError("no OCR adapter supplied")
    h, w = image.shape[:2]
    for x, y, rw, rh in regions:
        if x < 0 or y < 0 or x + rw > w or y + rh > h:
            raise ValueError(f"region {(x, y, rw, rh)} outside {w}x{h} image")
    out = []
    for region in regions:
        try:
            out.append(ocr.recognize(image, region))
        except Exception:
            logger.warning("OCR failed on region %s", region, exc_info=True)
            out.append("")
    return out


def normalize_token(raw: str) -> str | None:
    """Lowercase, strip non-alphanumeric edges, drop short or
    numeric-dominant tokens (weight declarations like "500g")."""
    token = _EDGE_STRIP.sub("", raw.strip().lower())
    if len(token) < 3:
        return None
    digits = sum(ch.isdigit() for ch in token)
    if 2 * digits >= len(token):
        return None
    return token


# ---------------------------------------------------------------------------
# Word-class index
# ---------------------------------------------------------------------------

@dataclass
class WordClassIndex:
    """Per-class histograms of normalized packaging tokens."""

    classes: list[str]
    histograms: list[dict[str, int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.histograms:
            self.histograms = [{} for _ in self.classes]
        if len(self.histograms) != len(self.classes):
            raise ValueError("one histogram per class required")

    def add(self, class_index: int, token: str, count: int = 1) -> None:
        hist = self.histograms[class_index]
        hist[token] = hist.get(token, 0) + count

    def total(self, class_index: int) -> int:
        return sum(self.histograms[class_index].values())

    def to_json(self) -> str:
        payload = {name: dict(sorted(self.histograms[i].items()))
                   for i, name in enumerate(self.classes)}
        return json.dumps(payload, indent=1, sort_keys=True)

    def save(self, path: Path | str) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: Path | str) -> "WordClassIndex":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        classes = sorted(payload)
        return cls(classes=classes,
                   histograms=[dict(payload[name]) for name in classes])


@dataclass(frozen=True)
class AutoMapped:
    class_index: int
    class_name: str


@dataclass(frozen=True)
class RankedEntry:
    class_index: int
    class_name: str
    count: int
    confidence: float


@dataclass(frozen=True)
class Ranked:
    entries: tuple[RankedEntry, ...]


@dataclass(frozen=True)
class Unknown:
    pass


def build_word_index(catalog: Catalog, ocr: OcrAdapter,
                     scorer: Callable[[np.ndarray], np.ndarray] = gradient_text_scorer,
                     ) -> WordClassIndex:
    """Score, segment, recognize, and count words over the training set.

    Uses only ground-truth class labels; no bounding-box supervision.
    Per-image adapter failures are logged and skipped, so a flaky plug-in
    degrades coverage instead of aborting the build.
    """
    index = WordClassIndex(classes=list(catalog.classes))
    for ci, name in enumerate(catalog.classes):
        for ref in catalog.train_images[name]:
            try:
                gray = to_grayscale(catalog.load_train_image(ref))
                regions = segment_text_regions(scorer(gray))
                strings = recognize_words(gray, regions, ocr.for_image(ref))
            except Exception:
                logger.warning("skipping %s: text pipeline failed", ref,
                               exc_info=True)
                continue
            for raw in strings:
                for piece in raw.split():
                    token = normalize_token(piece)
                    if token is not None:
                        index.add(ci, token)
    return index


def query_word(index: WordClassIndex, raw: str) -> AutoMapped | Ranked | Unknown:
    """Map a shopping-list word to classes.

    A token found in exactly one class auto-maps; several classes give a
    ranked list (count descending, ties toward the lower class index)
    with confidences that sum to one; no class, or a token rejected by
    normalization, is Unknown.
    """
    token = normalize_token(raw)
    if token is None:
        return Unknown()
    counts = [(ci, hist[token]) for ci, hist in enumerate(index.histograms)
              if token in hist]
    if not counts:
        return Unknown()
    if len(counts) == 1:
        ci = counts[0][0]
        return AutoMapped(class_index=ci, class_name=index.classes[ci])
    total = sum(c for _, c in counts)
    counts.sort(key=lambda t: (-t[1], t[0]))
    entries = tuple(RankedEntry(class_index=ci, class_name=index.classes[ci],
                                count=c, confidence=c / total)
                    for ci, c in counts)
    return Ranked(entries=entries)
