"""Image I/O and pixel-level transforms.

Everything downstream works on float arrays in [0, 1] (``RasterImage``) or
on {0, 1} ink masks (``BinaryGrid``, 1 = ink). The only file format is
8-bit PNG, grayscale or RGB.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    DegenerateHistogramWarning,
    IoError,
    MissingFile,
    ShapeMismatch,
    UnsupportedFormat,
)

__all__ = [
    "RasterImage",
    "BinaryGrid",
    "load_image",
    "save_image",
    "binarize",
    "resize",
    "to_grayscale",
]


@dataclass(frozen=True)
class RasterImage:
    """Grayscale (H, W) or color (3, H, W) image with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            pass
        elif px.ndim == 3 and px.shape[0] == 3:
            pass
        else:
            raise ShapeMismatch(f"expected (H, W) or (3, H, W), got {px.shape}")
        if px.shape[-1] < 1 or px.shape[-2] < 1:
            raise ShapeMismatch("image dimensions must be >= 1")
        if not np.isfinite(px).all():
            raise ShapeMismatch("pixel values must be finite")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ShapeMismatch("pixel values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[-2]

    @property
    def width(self) -> int:
        return self.pixels.shape[-1]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else self.pixels.shape[0]


@dataclass(frozen=True)
class BinaryGrid:
    """(H, W) grid of {0, 1} cells; 1 marks ink/foreground."""

    cells: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.cells)
        if c.ndim != 2 or c.shape[0] < 1 or c.shape[1] < 1:
            raise ShapeMismatch(f"expected a nonempty (H, W) grid, got {c.shape}")
        if not np.isin(c, (0, 1)).all():
            raise ShapeMismatch("grid cells must be exactly 0 or 1")
        object.__setattr__(self, "cells", c.astype(np.uint8))

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    def count(self) -> int:
        return int(self.cells.sum())


def load_image(path) -> RasterImage:
    """Load an 8-bit grayscale or RGB PNG, scaled to [0, 1]."""
    p = Path(path)
    if not p.is_file():
        raise MissingFile(f"no such file: {p}")
    try:
        with Image.open(p) as im:
            if im.format != "PNG":
                raise UnsupportedFormat(f"{p}: not a PNG (format={im.format})")
            if im.mode not in ("L", "RGB"):
                raise UnsupportedFormat(
                    f"{p}: unsupported PNG mode {im.mode!r}; need 8-bit L or RGB"
                )
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except UnidentifiedImageError as e:
        raise UnsupportedFormat(f"{p}: not a readable image: {e}") from e
    except OSError as e:
        raise IoError(f"{p}: {e}") from e
    if arr.ndim == 3:  # (H, W, 3) -> (3, H, W)
        arr = np.moveaxis(arr, -1, 0)
    return RasterImage(arr)


def save_image(img: RasterImage, path) -> None:
    """Write as 8-bit PNG; round trip error is at most 1/255 per pixel."""
    p = Path(path)
    try:
        p.parent.mkdir(parents=True, exist_ok=True)
        q = np.rint(img.pixels * 255.0).astype(np.uint8)
        if img.channels == 1:
            pil = Image.fromarray(q, mode="L")
        else:
            pil = Image.fromarray(np.moveaxis(q, 0, -1), mode="RGB")
        pil.save(p, format="PNG")
    except OSError as e:
        raise IoError(f"{p}: {e}") from e


def to_grayscale(img: RasterImage) -> RasterImage:
    """Collapse color to a single channel via the unweighted channel mean."""
    if img.channels == 1:
        return img
    return RasterImage(img.pixels.mean(axis=0))


def _otsu_threshold(gray: np.ndarray) -> float | None:
    """Threshold maximizing between-class variance of the 256-bin histogram.

    Returns None when the histogram is degenerate (constant image).
    """
    q = np.rint(gray * 255.0).astype(np.int64).ravel()
    hist = np.bincount(q, minlength=256).astype(np.float64)
    total = hist.sum()
    w0 = np.cumsum(hist)
    w1 = total - w0
    cum_mean = np.cumsum(hist * np.arange(256))
    grand = cum_mean[-1]
    valid = (w0 > 0) & (w1 > 0)
    if not valid.any():
        return None
    mu0 = np.where(valid, cum_mean / np.maximum(w0, 1), 0.0)
    mu1 = np.where(valid, (grand - cum_mean) / np.maximum(w1, 1), 0.0)
    sigma_b = np.where(valid, w0 * w1 * (mu0 - mu1) ** 2, -1.0)
    best = sigma_b.max()
    if best <= 0:
        return None
    # midpoint of the argmax plateau, mapped back to a cut between bins
    ks = np.flatnonzero(sigma_b == best)
    k = ks.mean()
    return (k + 0.5) / 255.0


def binarize(img: RasterImage, threshold, ink: str = "dark") -> BinaryGrid:
    """Threshold a single-channel image into an ink mask.

    ``threshold`` is a real in (0, 1) or the string ``"otsu"``. With
    ``ink="dark"`` a cell is 1 iff its pixel is strictly below the
    threshold; ``ink="light"`` marks pixels strictly above it. A constant
    image under Otsu yields an all-zero grid and a
    ``DegenerateHistogramWarning`` instead of an error.
    """
    if img.channels != 1:
        raise ShapeMismatch("binarize needs a single-channel image; convert color first")
    if ink not in ("dark", "light"):
        raise ValueError(f"ink must be 'dark' or 'light', got {ink!r}")
    gray = img.pixels
    if isinstance(threshold, str):
        if threshold != "otsu":
            raise ValueError(f"unknown threshold mode {threshold!r}")
        t = _otsu_threshold(gray)
        if t is None:
            warnings.warn(
                "constant image: Otsu threshold undefined, returning empty grid",
                DegenerateHistogramWarning,
                stacklevel=2,
            )
            return BinaryGrid(np.zeros(gray.shape, dtype=np.uint8))
    else:
        t = float(threshold)
        if not 0.0 < t < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {t}")
    if ink == "dark":
        cells = gray < t
    else:
        cells = gray > t
    return BinaryGrid(cells.astype(np.uint8))


def _resize_plane(plane: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resample with half-pixel-aligned sample centers.

    Uses the lerp form a + t*(b-a) so constant inputs are preserved
    exactly and identity sizes return the input bit-for-bit.
    """
    src_h, src_w = plane.shape
    ys = (np.arange(h, dtype=np.float64) + 0.5) * (src_h / h) - 0.5
    xs = (np.arange(w, dtype=np.float64) + 0.5) * (src_w / w) - 0.5
    y0 = np.clip(np.floor(ys), 0, src_h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, src_w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, src_h - 1)
    x1 = np.minimum(x0 + 1, src_w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    tl = plane[np.ix_(y0, x0)]
    tr = plane[np.ix_(y0, x1)]
    bl = plane[np.ix_(y1, x0)]
    br = plane[np.ix_(y1, x1)]
    top = tl + fx * (tr - tl)
    bot = bl + fx * (br - bl)
    out = top + fy * (bot - top)
    return np.clip(out, 0.0, 1.0)


def resize(img: RasterImage, h: int, w: int) -> RasterImage:
    """Bilinear resize to (h, w); values stay in [0, 1]."""
    if h < 1 or w < 1:
        raise ValueError(f"target size must be >= 1, got {(h, w)}")
    if (h, w) == (img.height, img.width):
        return RasterImage(img.pixels.copy())
    if img.channels == 1:
        return RasterImage(_resize_plane(img.pixels, h, w))
    planes = [_resize_plane(ch, h, w) for ch in img.pixels]
    return RasterImage(np.stack(planes, axis=0))
