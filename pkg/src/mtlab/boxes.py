"""Axis-aligned box utilities shared by the detector, its loss and the metrics.

Boxes are ``(x0, y0, x1, y1)`` in continuous pixel coordinates where pixel
``(row, col)`` covers ``[col, col + 1) x [row, row + 1)``.  A mask's tight box
is therefore ``(min_col, min_row, max_col + 1, max_row + 1)``.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

# Fixed scaling of RoI-head regression targets, as in Faster/Mask R-CNN.
HEAD_DELTA_WEIGHTS = (10.0, 10.0, 5.0, 5.0)
RPN_DELTA_WEIGHTS = (1.0, 1.0, 1.0, 1.0)
_MAX_LOG_SCALE = float(np.log(1000.0 / 16))


def mask_to_box(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    """Tight bounding rectangle of the nonzero pixels, or None for an empty mask."""
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


def area(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``a`` (N, 4) and ``b`` (M, 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    x0 = np.maximum(a[:, None, 0], b[None, :, 0])
    y0 = np.maximum(a[:, None, 1], b[None, :, 1])
    x1 = np.minimum(a[:, None, 2], b[None, :, 2])
    y1 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x1 - x0, 0, None) * np.clip(y1 - y0, 0, None)
    union = area(a)[:, None] + area(b)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices by descending score."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    # stable sort keeps ties in input order, which keeps runs reproducible
    order = np.argsort(-scores, kind="stable")
    keep = []
    suppressed = np.zeros(len(order), dtype=bool)
    ious = iou_matrix(boxes, boxes)
    for pos, idx in enumerate(order):
        if suppressed[pos]:
            continue
        keep.append(idx)
        rest = order[pos + 1:]
        suppressed[pos + 1:] |= ious[idx, rest] > iou_threshold
    return np.asarray(keep, dtype=np.int64)


def encode(boxes: np.ndarray, refs: np.ndarray, weights=RPN_DELTA_WEIGHTS) -> np.ndarray:
    """Regression targets ``(dx, dy, dw, dh)`` that map ``refs`` onto ``boxes``."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    refs = np.asarray(refs, dtype=np.float64).reshape(-1, 4)
    wx, wy, ww, wh = weights
    rw = refs[:, 2] - refs[:, 0]
    rh = refs[:, 3] - refs[:, 1]
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    dx = ((boxes[:, 0] + 0.5 * bw) - (refs[:, 0] + 0.5 * rw)) / rw
    dy = ((boxes[:, 1] + 0.5 * bh) - (refs[:, 1] + 0.5 * rh)) / rh
    return np.stack([wx * dx, wy * dy, ww * np.log(bw / rw), wh * np.log(bh / rh)], axis=1)


def decode(deltas: np.ndarray, refs: np.ndarray, weights=RPN_DELTA_WEIGHTS) -> np.ndarray:
    """Inverse of :func:`encode`."""
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    refs = np.asarray(refs, dtype=np.float64).reshape(-1, 4)
    wx, wy, ww, wh = weights
    rw = refs[:, 2] - refs[:, 0]
    rh = refs[:, 3] - refs[:, 1]
    cx = refs[:, 0] + 0.5 * rw + deltas[:, 0] / wx * rw
    cy = refs[:, 1] + 0.5 * rh + deltas[:, 1] / wy * rh
    w = rw * np.exp(np.minimum(deltas[:, 2] / ww, _MAX_LOG_SCALE))
    h = rh * np.exp(np.minimum(deltas[:, 3] / wh, _MAX_LOG_SCALE))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip(boxes: np.ndarray, height: int, width: int) -> np.ndarray:
    boxes = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    boxes[:, [0, 2]] = boxes[:, [0, 2]].clip(0, width)
    boxes[:, [1, 3]] = boxes[:, [1, 3]].clip(0, height)
    return boxes


def roi_align(features: torch.Tensor, rois: np.ndarray, output_size: int,
              spatial_scale: float) -> torch.Tensor:
    """Bilinear region pooling, one sample at the centre of each output bin.

    ``features`` is (1, C, H, W); ``rois`` (R, 4) in image coordinates.
    Returns (R, C, output_size, output_size).  Differentiable in ``features``.
    """
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    n_rois = rois.shape[0]
    _, channels, fh, fw = features.shape
    if n_rois == 0:
        return features.new_zeros((0, channels, output_size, output_size))
    steps = (np.arange(output_size) + 0.5) / output_size
    xs = (rois[:, 0:1] + steps[None, :] * (rois[:, 2:3] - rois[:, 0:1])) * spatial_scale
    ys = (rois[:, 1:2] + steps[None, :] * (rois[:, 3:4] - rois[:, 1:2])) * spatial_scale
    # grid_sample with align_corners=False: -1 and +1 are the outer pixel edges
    gx = 2.0 * xs / fw - 1.0
    gy = 2.0 * ys / fh - 1.0
    grid = np.empty((n_rois, output_size, output_size, 2))
    grid[..., 0] = gx[:, None, :]
    grid[..., 1] = gy[:, :, None]
    grid_t = torch.as_tensor(grid, dtype=features.dtype)
    expanded = features.expand(n_rois, channels, fh, fw)
    return F.grid_sample(expanded, grid_t, mode="bilinear", padding_mode="border",
                         align_corners=False)
