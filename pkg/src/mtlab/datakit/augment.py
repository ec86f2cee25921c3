"""Geometric augmentations applied jointly to an image and all of its masks.

Each transform is a backward coordinate map sampled with
:func:`scipy.ndimage.map_coordinates`: bilinear for the image, nearest for
masks.  Boxes are recomputed from the warped masks afterwards.
"""
from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from mtlab.datakit.preprocessing import quantize
from mtlab.datakit.types import Instance, Sample
from mtlab.errors import ArgumentError

AUGMENT_OPS = ("elastic", "rotate_small", "crop")
MAX_ROTATION_DEG = 10.0
CROP_RANGE = (0.8, 1.0)
ELASTIC_SIGMA_FRACTION = 1 / 16
ELASTIC_MAX_SHIFT_FRACTION = 0.03


def _warp(sample: Sample, rows: np.ndarray, cols: np.ndarray) -> Sample:
    coords = np.stack([rows, cols])
    image = map_coordinates(sample.image.astype(np.float64), coords, order=1,
                            mode="constant", cval=0.0)

    def warp_mask(mask):
        out = map_coordinates(mask.astype(np.float64), coords, order=0,
                              mode="constant", cval=0.0)
        return (out > 0.5).astype(np.uint8)

    seg = None if sample.seg_mask is None else warp_mask(sample.seg_mask)
    instances = None
    if sample.instances is not None:
        instances = []
        for inst in sample.instances:
            mask = warp_mask(inst.mask)
            if mask.any():
                instances.append(Instance(inst.det_class, mask))
    return Sample(quantize(image), sample.sample_id, class_label=sample.class_label,
                  seg_mask=seg, instances=instances)


def _identity_grid(shape):
    return np.meshgrid(np.arange(shape[0], dtype=np.float64),
                       np.arange(shape[1], dtype=np.float64), indexing="ij")


def rotate(sample: Sample, angle_deg: float) -> Sample:
    """Rotate about the image centre; a zero angle returns an exact copy."""
    if angle_deg == 0:
        return _warp_identity(sample)
    h, w = sample.image.shape
    rows, cols = _identity_grid((h, w))
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t = np.deg2rad(angle_deg)
    dy, dx = rows - cy, cols - cx
    src_rows = cy + np.cos(t) * dy - np.sin(t) * dx
    src_cols = cx + np.sin(t) * dy + np.cos(t) * dx
    return _warp(sample, src_rows, src_cols)


def crop(sample: Sample, fraction: float, top: float, left: float) -> Sample:
    """Crop a ``fraction``-sized window at relative offset (top, left) and resize back.

    ``top`` and ``left`` are in [0, 1] and position the window inside the free margin.
    """
    h, w = sample.image.shape
    ch, cw = fraction * h, fraction * w
    y0, x0 = top * (h - ch), left * (w - cw)
    rows, cols = _identity_grid((h, w))
    src_rows = y0 + (rows + 0.5) * (ch / h) - 0.5
    src_cols = x0 + (cols + 0.5) * (cw / w) - 0.5
    return _warp(sample, src_rows, src_cols)


def elastic(sample: Sample, rng: np.random.Generator) -> Sample:
    """Smooth random displacement field, Simard-style."""
    h, w = sample.image.shape
    sigma = max(h * ELASTIC_SIGMA_FRACTION, 1.0)
    field = [gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma) for _ in range(2)]
    peak = max(max(float(np.abs(f).max()) for f in field), 1e-12)
    shift = ELASTIC_MAX_SHIFT_FRACTION * h
    rows, cols = _identity_grid((h, w))
    return _warp(sample, rows + field[0] / peak * shift, cols + field[1] / peak * shift)


def _warp_identity(sample: Sample) -> Sample:
    return Sample(sample.image.copy(), sample.sample_id, class_label=sample.class_label,
                  seg_mask=None if sample.seg_mask is None else sample.seg_mask.copy(),
                  instances=None if sample.instances is None else
                  [Instance(i.det_class, i.mask.copy()) for i in sample.instances])


def augment(sample: Sample, ops, seed: int) -> Sample:
    """Apply ``ops`` in order, drawing every random parameter from ``seed``.

    Instances whose mask leaves the frame are dropped.
    """
    ops = list(ops)
    unknown = [op for op in ops if op not in AUGMENT_OPS]
    if unknown:
        raise ArgumentError(f"unknown augmentation op(s) {unknown}; expected {AUGMENT_OPS}")
    rng = np.random.default_rng(seed)
    out = sample
    for op in ops:
        if op == "rotate_small":
            out = rotate(out, rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG))
        elif op == "crop":
            out = crop(out, rng.uniform(*CROP_RANGE), rng.uniform(), rng.uniform())
        else:
            out = elastic(out, rng)
    return out if ops else _warp_identity(sample)
