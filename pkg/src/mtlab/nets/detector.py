"""Minimal two-stage instance detector on the stride-16 encoder level.

Single-level RPN (3 scales x 3 aspect ratios per cell), bilinear RoI pooling
to 7x7 for the box head and 14x14 for the mask head, class-agnostic box
regression and one mask channel per lesion class.  The heads pool from the
stride-4 level, where a lesion covers several cells even on small inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from mtlab import boxes as bx
from mtlab.datakit.types import DetClass
from mtlab.nets.model import Params, conv, linear
from mtlab.nets.store import BackboneSpec


@dataclass(frozen=True)
class DetectorConfig:
    anchor_fractions: tuple[float, ...] = (1 / 8, 1 / 4, 1 / 2)
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    rpn_batch: int = 64
    rpn_pos_fraction: float = 0.5
    rpn_nms_iou: float = 0.7
    pre_nms_train: int = 200
    post_nms_train: int = 32
    pre_nms_test: int = 100
    post_nms_test: int = 16
    roi_batch: int = 32
    roi_pos_fraction: float = 0.25
    roi_fg_iou: float = 0.5
    box_pool: int = 7
    mask_pool: int = 14
    det_nms_iou: float = 0.5
    min_box_size: float = 1.0


DEFAULT_CONFIG = DetectorConfig()


@dataclass(eq=False)
class Detection:
    box: tuple[float, float, float, float]
    det_class: DetClass
    score: float
    mask: np.ndarray  # binary, covering the integer pixel span of ``box``


@dataclass(eq=False)
class Proposals:
    """RPN outputs for the anchors chosen for the loss, plus the RoIs fed to the heads."""

    anchors: np.ndarray
    rpn_logits: torch.Tensor
    rpn_deltas: torch.Tensor
    rois: np.ndarray
    anchor_index: np.ndarray | None = None


@dataclass(eq=False)
class HeadOutputs:
    class_logits: torch.Tensor  # (R, 1 + n_classes); column 0 is background
    box_deltas: torch.Tensor    # (R, 4)
    mask_logits: torch.Tensor   # (R, n_classes, M, M)


def make_anchors(spec: BackboneSpec, cfg: DetectorConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Anchors ordered (row, col, scale, ratio) to match the RPN output layout."""
    stride = 16
    n = spec.input_size // stride
    shapes = []
    for frac in cfg.anchor_fractions:
        side = frac * spec.input_size
        for ratio in cfg.anchor_ratios:
            shapes.append((side / np.sqrt(ratio), side * np.sqrt(ratio)))
    out = np.empty((n, n, len(shapes), 4))
    centres = (np.arange(n) + 0.5) * stride
    for k, (w, h) in enumerate(shapes):
        out[:, :, k, 0] = centres[None, :] - w / 2
        out[:, :, k, 1] = centres[:, None] - h / 2
        out[:, :, k, 2] = centres[None, :] + w / 2
        out[:, :, k, 3] = centres[:, None] + h / 2
    return out.reshape(-1, 4)


def rpn_forward(p: Params, bottleneck):
    """Returns reduced features, objectness logits (N, A) and deltas (N, A, 4)."""
    f = F.relu(conv(bottleneck, p, "det.reduce"))
    h = F.relu(conv(f, p, "det.rpn.conv"))
    logits = conv(h, p, "det.rpn.logits")
    deltas = conv(h, p, "det.rpn.deltas")
    n, k, hh, ww = logits.shape
    logits = logits.permute(0, 2, 3, 1).reshape(n, -1)
    deltas = deltas.reshape(n, k, 4, hh, ww).permute(0, 3, 4, 1, 2).reshape(n, -1, 4)
    return f, logits, deltas


ROI_LEVEL = 2


def roi_features(p: Params, levels):
    """Head input map (N, C, S/4, S/4) from the encoder pyramid."""
    return F.relu(conv(levels[ROI_LEVEL], p, "det.roi_reduce"))


def generate_proposals(logits, deltas, anchors, size: int, cfg: DetectorConfig,
                       training: bool) -> np.ndarray:
    scores = logits.detach().cpu().double().numpy()
    boxes = bx.clip(bx.decode(deltas.detach().cpu().double().numpy(), anchors), size, size)
    ok = ((boxes[:, 2] - boxes[:, 0] >= cfg.min_box_size)
          & (boxes[:, 3] - boxes[:, 1] >= cfg.min_box_size))
    boxes, scores = boxes[ok], scores[ok]
    pre = cfg.pre_nms_train if training else cfg.pre_nms_test
    post = cfg.post_nms_train if training else cfg.post_nms_test
    order = np.argsort(-scores, kind="stable")[:pre]
    boxes, scores = boxes[order], scores[order]
    keep = bx.nms(boxes, scores, cfg.rpn_nms_iou)[:post]
    return boxes[keep]


def label_anchors(anchors, gt_boxes, cfg: DetectorConfig = DEFAULT_CONFIG):
    """Per-anchor label (1 object, 0 background, -1 ignored) and matched GT index."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    labels = -np.ones(len(anchors), dtype=np.int64)
    if len(gt_boxes) == 0:
        labels[:] = 0
        return labels, np.zeros(len(anchors), dtype=np.int64)
    ious = bx.iou_matrix(anchors, gt_boxes)
    best = ious.argmax(axis=1)
    best_iou = ious.max(axis=1)
    labels[best_iou < cfg.rpn_neg_iou] = 0
    labels[best_iou >= cfg.rpn_pos_iou] = 1
    # every GT keeps at least its best-overlapping anchors
    per_gt = ious.max(axis=0)
    for g, top in enumerate(per_gt):
        if top > 0:
            hits = np.flatnonzero(ious[:, g] == top)
            labels[hits] = 1
            best[hits] = g
    return labels, best


def label_rois(rois, gt_boxes, gt_classes, cfg: DetectorConfig = DEFAULT_CONFIG):
    """Per-RoI class target (0 background, 1 + det class) and matched GT index."""
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    if len(gt_boxes) == 0:
        return np.zeros(len(rois), dtype=np.int64), np.zeros(len(rois), dtype=np.int64)
    ious = bx.iou_matrix(rois, gt_boxes)
    best = ious.argmax(axis=1)
    fg = ious.max(axis=1) >= cfg.roi_fg_iou
    labels = np.where(fg, np.asarray(gt_classes)[best] + 1, 0)
    return labels.astype(np.int64), best


def _gt_arrays(instances):
    instances = instances or []
    boxes = np.array([i.box for i in instances], dtype=np.float64).reshape(-1, 4)
    classes = np.array([i.det_class.index for i in instances], dtype=np.int64)
    return boxes, classes


def sample_anchors(anchors, instances, cfg: DetectorConfig, rng: np.random.Generator):
    gt_boxes, _ = _gt_arrays(instances)
    labels, _ = label_anchors(anchors, gt_boxes, cfg)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    n_pos = min(len(pos), int(cfg.rpn_batch * cfg.rpn_pos_fraction))
    n_neg = min(len(neg), cfg.rpn_batch - n_pos)
    chosen = np.concatenate([rng.choice(pos, n_pos, replace=False),
                             rng.choice(neg, n_neg, replace=False)])
    return np.sort(chosen)


def sample_rois(proposals, instances, cfg: DetectorConfig, rng: np.random.Generator):
    """Mix proposals with the GT boxes, then draw a fixed-ratio fg/bg batch."""
    gt_boxes, gt_classes = _gt_arrays(instances)
    cand = np.concatenate([np.asarray(proposals).reshape(-1, 4), gt_boxes])
    labels, _ = label_rois(cand, gt_boxes, gt_classes, cfg)
    fg = np.flatnonzero(labels > 0)
    bg = np.flatnonzero(labels == 0)
    n_fg = min(len(fg), int(cfg.roi_batch * cfg.roi_pos_fraction))
    n_bg = min(len(bg), cfg.roi_batch - n_fg)
    chosen = np.concatenate([rng.choice(fg, n_fg, replace=False),
                             rng.choice(bg, n_bg, replace=False)]).astype(np.int64)
    return cand[chosen]


def mask_forward(p: Params, features, rois, spec: BackboneSpec,
                 cfg: DetectorConfig = DEFAULT_CONFIG):
    m = bx.roi_align(features, rois, cfg.mask_pool, features.shape[-1] / spec.input_size)
    m = F.relu(conv(m, p, "det.mask.conv1"))
    m = F.relu(conv(m, p, "det.mask.conv2"))
    return conv(m, p, "det.mask.out")


def head_forward(p: Params, features, rois, spec: BackboneSpec,
                 cfg: DetectorConfig = DEFAULT_CONFIG, mask_rows=None) -> HeadOutputs:
    """Box and mask heads for one image; ``features`` is (1, C, h, w).

    With ``mask_rows`` the mask branch only runs for those RoIs and the
    other rows of ``mask_logits`` are zero.
    """
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    pooled = bx.roi_align(features, rois, cfg.box_pool, features.shape[-1] / spec.input_size)
    h = pooled.flatten(1)
    h = F.relu(linear(h, p, "det.box.fc1"))
    h = F.relu(linear(h, p, "det.box.fc2"))
    if mask_rows is None:
        masks = mask_forward(p, features, rois, spec, cfg)
    else:
        mask_rows = np.asarray(mask_rows, dtype=np.int64)
        m = cfg.mask_pool
        masks = features.new_zeros((len(rois), p["det.mask.out.bias"].shape[0], m, m))
        if len(mask_rows):
            masks = masks.index_put((torch.as_tensor(mask_rows),),
                                    mask_forward(p, features, rois[mask_rows], spec, cfg))
    return HeadOutputs(linear(h, p, "det.box.cls"), linear(h, p, "det.box.deltas"), masks)


def train_forward(p: Params, levels, instances_per_image, spec: BackboneSpec,
                  rng: np.random.Generator, cfg: DetectorConfig = DEFAULT_CONFIG,
                  fixed=None, exhaustive: bool = False):
    """Run RPN and heads with training-time sampling.

    ``fixed`` (a list of ``(anchor_index, rois)`` per image) replaces the
    random sampling, which makes the loss a smooth function of the
    parameters for finite-difference checks.  ``exhaustive`` evaluates
    without any randomness or dependence on the current proposals: every
    labelled anchor enters the RPN terms and the heads see the clipped
    anchor boxes plus the ground-truth boxes.
    """
    _, logits, deltas = rpn_forward(p, levels[4])
    f = roi_features(p, levels)
    anchors = make_anchors(spec, cfg)
    if exhaustive:
        fixed_rois = bx.clip(anchors, spec.input_size, spec.input_size)
        fixed_rois = fixed_rois[(fixed_rois[:, 2] - fixed_rois[:, 0] >= cfg.min_box_size)
                                & (fixed_rois[:, 3] - fixed_rois[:, 1] >= cfg.min_box_size)]
    proposals, heads = [], []
    for i, instances in enumerate(instances_per_image):
        if fixed is not None:
            a_idx, rois = fixed[i]
        elif exhaustive:
            gt_boxes, _ = _gt_arrays(instances)
            a_idx = np.flatnonzero(label_anchors(anchors, gt_boxes, cfg)[0] >= 0)
            rois = np.concatenate([fixed_rois, gt_boxes])
        else:
            a_idx = sample_anchors(anchors, instances, cfg, rng)
            props = generate_proposals(logits[i], deltas[i], anchors, spec.input_size, cfg, True)
            rois = sample_rois(props, instances, cfg, rng)
        proposals.append(Proposals(anchors[a_idx], logits[i][a_idx], deltas[i][a_idx],
                                   rois, a_idx))
        gt_boxes, gt_classes = _gt_arrays(instances)
        fg = np.flatnonzero(label_rois(rois, gt_boxes, gt_classes, cfg)[0] > 0)
        heads.append(head_forward(p, f[i:i + 1], rois, spec, cfg, mask_rows=fg))
    return proposals, heads


def _paste_mask(prob14: torch.Tensor, box, size: int) -> np.ndarray:
    x0, y0 = int(np.floor(box[0])), int(np.floor(box[1]))
    x1 = min(size, max(x0 + 1, int(np.ceil(box[2]))))
    y1 = min(size, max(y0 + 1, int(np.ceil(box[3]))))
    out = F.interpolate(prob14[None, None].double(), size=(y1 - y0, x1 - x0),
                        mode="bilinear", align_corners=False)[0, 0]
    return (out.numpy() > 0.5).astype(np.uint8)


def detect_image(p: Params, features, logits, deltas, spec: BackboneSpec, score_threshold: float,
                 max_detections: int, cfg: DetectorConfig = DEFAULT_CONFIG) -> list[Detection]:
    """Inference for one image given its head features (1, C, h, w) and RPN outputs."""
    size = spec.input_size
    anchors = make_anchors(spec, cfg)
    rois = generate_proposals(logits, deltas, anchors, size, cfg, training=False)
    if len(rois) == 0:
        return []
    with torch.no_grad():
        out = head_forward(p, features, rois, spec, cfg, mask_rows=[])
        probs = torch.softmax(out.class_logits.double(), dim=1).numpy()
    boxes = bx.clip(bx.decode(out.box_deltas.double().numpy(), rois, bx.HEAD_DELTA_WEIGHTS),
                    size, size)
    classes = probs[:, 1:].argmax(axis=1)
    scores = probs[:, 1:].max(axis=1)
    ok = ((scores >= score_threshold) & (boxes[:, 2] - boxes[:, 0] > 1e-3)
          & (boxes[:, 3] - boxes[:, 1] > 1e-3))
    kept = []
    for c in np.unique(classes[ok]):
        idx = np.flatnonzero(ok & (classes == c))
        kept.extend(idx[bx.nms(boxes[idx], scores[idx], cfg.det_nms_iou)])
    kept = sorted(kept, key=lambda r: (-scores[r], r))[:max_detections]
    if not kept:
        return []
    with torch.no_grad():
        mask_probs = torch.sigmoid(mask_forward(p, features, rois[kept], spec, cfg).double())
    return [Detection(tuple(float(v) for v in boxes[r]), DetClass.from_index(int(classes[r])),
                      float(scores[r]), _paste_mask(mask_probs[j, classes[r]], boxes[r], size))
            for j, r in enumerate(kept)]
