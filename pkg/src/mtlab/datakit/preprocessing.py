"""Histogram equalisation, resizing and [0, 1] scaling of raw slices."""
from __future__ import annotations

import numpy as np
from skimage.transform import resize as _sk_resize

from mtlab.errors import ArgumentError

N_BINS = 256
TARGET_SIZE = 256
_U16 = np.float32(65535.0)


def to_uint16(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 65535.0).astype(np.uint16)


def from_uint16(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float32) / _U16


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap an image onto the 16-bit grid used on disk, so saving is lossless."""
    return from_uint16(to_uint16(image))


def gray_levels(image: np.ndarray, n_bins: int = N_BINS) -> np.ndarray:
    """Map intensities linearly onto integer levels ``0 .. n_bins - 1``."""
    lo, hi = float(image.min()), float(image.max())
    if hi <= lo:
        return np.zeros(image.shape, dtype=np.int64)
    scaled = (image.astype(np.float64) - lo) / (hi - lo) * (n_bins - 1)
    return np.floor(scaled + 0.5).astype(np.int64)


def equalize_histogram(image: np.ndarray, n_bins: int = N_BINS) -> np.ndarray:
    """Classic CDF remapping ``(cdf(v) - cdf_min) / (N - cdf_min)`` onto [0, 1].

    A single-level image has no spread to redistribute and maps to all zeros.
    """
    levels = gray_levels(image, n_bins)
    cdf = np.cumsum(np.bincount(levels.ravel(), minlength=n_bins))
    total = levels.size
    cdf_min = cdf[levels.min()]
    if total == cdf_min:
        return np.zeros(image.shape, dtype=np.float64)
    lut = (cdf - cdf_min) / (total - cdf_min)
    return np.clip(lut[levels], 0.0, 1.0)


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    if image.shape == (size, size):
        return image
    return _sk_resize(image, (size, size), order=1, mode="edge",
                      anti_aliasing=False, preserve_range=True)


def resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    mask = np.asarray(mask) > 0
    if mask.shape == (size, size):
        return mask.astype(np.uint8)
    out = _sk_resize(mask.astype(np.float64), (size, size), order=0, mode="edge",
                     anti_aliasing=False, preserve_range=True)
    return (out > 0.5).astype(np.uint8)


def preprocess(raw_image, raw_mask=None, size: int = TARGET_SIZE):
    """Equalise, resize to ``size`` x ``size`` and scale into [0, 1].

    Equalisation happens before resizing.  Images are resized bilinearly,
    masks with nearest neighbour and re-binarised.  The returned image is
    float32 on the 16-bit grid.
    """
    raw_image = np.asarray(raw_image, dtype=np.float64)
    if raw_image.size == 0 or raw_image.ndim != 2:
        raise ArgumentError(f"raw image must be a nonempty 2D array, got shape {raw_image.shape}")
    if np.any(raw_image < 0) or not np.all(np.isfinite(raw_image)):
        raise ArgumentError("raw image must hold finite nonnegative values")
    mask = None
    if raw_mask is not None:
        raw_mask = np.asarray(raw_mask)
        if raw_mask.shape != raw_image.shape:
            raise ArgumentError(
                f"mask shape {raw_mask.shape} differs from image shape {raw_image.shape}")
        mask = resize_mask(raw_mask, size)
    image = resize_image(equalize_histogram(raw_image), size)
    return quantize(image), mask
