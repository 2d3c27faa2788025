"""Grayscale conversion, normalization, scale pyramids, and dense HOG grids.

Images are plain numpy arrays throughout: RGB images are ``(H, W, 3)``
uint8 or float, gray images are ``(H, W)`` float32 with intensities in
``[0, 1]``.  The HOG grid computed here is the substrate for both patch
mining and detector evaluation, so its cell layout is part of the
package contract: 8x8-pixel cells on an 8-pixel stride, 9 unsigned
orientation bins, and per-cell descriptors normalized over the four
overlapping 2x2-cell blocks the cell participates in (36 values per
cell).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import cv2
import numpy as np

CELL_SIZE = 8
CELL_STRIDE = 8
ORIENT_BINS = 9
BLOCK_CLIP = 0.2
CELL_DESC_LEN = 4 * ORIENT_BINS

# Rec.601 luma weights, applied to RGB channel order.
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)

_NORM_EPS = 1e-10


@dataclass(frozen=True)
class HogGrid:
    """Dense grid of block-normalized gradient-orientation descriptors.

    ``data`` has shape ``(cells_y, cells_x, 36)`` with entries in
    ``[0, 1]``; ``energy`` has shape ``(cells_y, cells_x)`` and holds the
    raw (un-normalized) gradient magnitude accumulated per cell, used to
    reject near-uniform windows during seed sampling.  ``scale`` is the
    pyramid scale factor the source image was resized by before the grid
    was computed (1.0 for the original image).
    """

    data: np.ndarray
    energy: np.ndarray
    scale: float = 1.0

    @property
    def cells_y(self) -> int:
        return self.data.shape[0]

    @property
    def cells_x(self) -> int:
        return self.data.shape[1]


class ZScored(NamedTuple):
    """Z-score normalized intensity grid plus a degenerate-input flag."""

    values: np.ndarray
    degenerate: bool


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """Convert an RGB image to a float32 gray image in [0, 1].

    Uses fixed Rec.601 luminance weights.  Accepts uint8 (scaled by 255)
    or float inputs already in [0, 1]; single-channel input is passed
    through after dtype conversion.
    """
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    else:
        arr = arr.astype(np.float64)
    if arr.ndim == 2:
        return arr.astype(np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) RGB image, got shape {arr.shape}")
    return (arr @ _LUMA).astype(np.float32)


def zscore_normalize(image: np.ndarray) -> ZScored:
    """Subtract the image mean and divide by the standard deviation.

    A constant image (zero variance) yields an all-zero grid with the
    degenerate flag set instead of dividing by zero.
    """
    arr = np.asarray(image, dtype=np.float64)
    std = float(arr.std())
    if std == 0.0:
        return ZScored(np.zeros_like(arr, dtype=np.float32), True)
    out = (arr - arr.mean()) / std
    return ZScored(out.astype(np.float32), False)


def build_pyramid(image: np.ndarray, levels: int = 7,
                  factor: float = 2.0 ** -0.5) -> list[np.ndarray]:
    """Build a multi-scale pyramid by repeated resizing.

    Level 0 is the input; level i has dimensions ``round(dim * factor**i)``.
    Levels too small to hold a single HOG cell are dropped, so fewer than
    ``levels`` images may come back.
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if not 0.0 < factor < 1.0:
        raise ValueError("factor must lie in (0, 1)")
    img = np.asarray(image, dtype=np.float32)
    h, w = img.shape[:2]
    out = []
    for i in range(levels):
        lh = int(round(h * factor ** i))
        lw = int(round(w * factor ** i))
        if lh < CELL_SIZE or lw < CELL_SIZE:
            break
        if i == 0:
            out.append(img)
        else:
            out.append(cv2.resize(img, (lw, lh), interpolation=cv2.INTER_AREA))
    return out


def pyramid_scales(levels: int = 7, factor: float = 2.0 ** -0.5) -> list[float]:
    return [factor ** i for i in range(levels)]


def _cell_histograms(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell orientation histograms (un-normalized) and gradient energy."""
    h, w = image.shape
    cy = (h - CELL_SIZE) // CELL_STRIDE + 1
    cx = (w - CELL_SIZE) // CELL_STRIDE + 1

    padded = np.pad(image.astype(np.float64), 1, mode="edge")
    gx = padded[1:-1, 2:] - padded[1:-1, :-2]
    gy = padded[2:, 1:-1] - padded[:-2, 1:-1]
    mag = np.hypot(gx, gy)
    # Unsigned orientation in [0, pi); bin centers sit at i * (pi / 9) so a
    # pure horizontal gradient lands entirely in bin 0.
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    pos = theta * (ORIENT_BINS / np.pi)
    b0 = np.floor(pos).astype(np.int64) % ORIENT_BINS
    frac = pos - np.floor(pos)
    b1 = (b0 + 1) % ORIENT_BINS

    # Crop to whole cells, then accumulate via bincount on a combined
    # (cell, bin) index; each pixel splits its magnitude between the two
    # nearest orientation bins.
    hh, ww = cy * CELL_SIZE, cx * CELL_SIZE
    rows = np.arange(hh) // CELL_SIZE
    cols = np.arange(ww) // CELL_SIZE
    cell_idx = (rows[:, None] * cx + cols[None, :]).ravel()

    def crop(a):
        return a[:hh, :ww].ravel()

    m, f = crop(mag), crop(frac)
    flat0 = cell_idx * ORIENT_BINS + crop(b0)
    flat1 = cell_idx * ORIENT_BINS + crop(b1)
    n = cy * cx * ORIENT_BINS
    hist = np.bincount(flat0, weights=m * (1.0 - f), minlength=n)
    hist += np.bincount(flat1, weights=m * f, minlength=n)
    hist = hist.reshape(cy, cx, ORIENT_BINS)
    energy = hist.sum(axis=2)
    return hist, energy


def compute_hog(image: np.ndarray) -> HogGrid:
    """Dense HOG grid: 8x8 cells, stride 8, 9 unsigned orientation bins.

    Each cell's final descriptor concatenates its histogram normalized
    within the four overlapping 2x2-cell blocks containing it (block
    indices clamped at the grid border), using L2-hys normalization with
    clipping at 0.2.  Raises ValueError for images smaller than one cell.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 2:
        raise ValueError("compute_hog expects a 2-D gray image")
    h, w = img.shape
    if h < CELL_SIZE or w < CELL_SIZE:
        raise ValueError(f"image {h}x{w} smaller than one {CELL_SIZE}x{CELL_SIZE} cell")

    hist, energy = _cell_histograms(img)
    cy, cx = hist.shape[:2]
    by, bx = max(1, cy - 1), max(1, cx - 1)

    # block_h[y, x] = stacked histograms of the (up to) 2x2 cells of block
    # (y, x); degenerate 1-cell-wide grids fall back to 1-cell blocks.
    y0 = np.minimum(np.arange(by), cy - 1)
    y1 = np.minimum(y0 + 1, cy - 1)
    x0 = np.minimum(np.arange(bx), cx - 1)
    x1 = np.minimum(x0 + 1, cx - 1)
    quads = np.stack(
        [hist[np.ix_(y0, x0)], hist[np.ix_(y0, x1)],
         hist[np.ix_(y1, x0)], hist[np.ix_(y1, x1)]], axis=2
    )  # (by, bx, 4, 9)
    norms = np.sqrt((quads ** 2).sum(axis=(2, 3)) + _NORM_EPS ** 2)
    v = quads / norms[:, :, None, None]
    v = np.minimum(v, BLOCK_CLIP)
    renorm = np.sqrt((v ** 2).sum(axis=(2, 3)) + _NORM_EPS ** 2)

    # Cell (y, x) participates in blocks (y-1..y, x-1..x); clamp at borders
    # so every cell sees exactly four block contexts.
    cyi = np.arange(cy)
    cxi = np.arange(cx)
    desc = np.empty((cy, cx, CELL_DESC_LEN), dtype=np.float64)
    slot = 0
    for dy in (-1, 0):
        for dx in (-1, 0):
            byi = np.clip(cyi + dy, 0, by - 1)
            bxi = np.clip(cxi + dx, 0, bx - 1)
            h_norm = hist / norms[np.ix_(byi, bxi)][:, :, None]
            h_norm = np.minimum(h_norm, BLOCK_CLIP)
            h_norm /= renorm[np.ix_(byi, bxi)][:, :, None]
            desc[:, :, slot * ORIENT_BINS:(slot + 1) * ORIENT_BINS] = h_norm
            slot += 1

    return HogGrid(data=desc.astype(np.float32), energy=energy.astype(np.float32))


def hog_pyramid(image: np.ndarray, levels: int = 7,
                factor: float = 2.0 ** -0.5) -> list[HogGrid]:
    """HOG grids for every usable pyramid level of ``image``."""
    grids = []
    for i, level in enumerate(build_pyramid(image, levels, factor)):
        if level.shape[0] < CELL_SIZE or level.shape[1] < CELL_SIZE:
            continue
        grid = compute_hog(level)
        grids.append(HogGrid(data=grid.data, energy=grid.energy, scale=factor ** i))
    return grids
