"""Task losses and their weighted combination.

Each loss accepts numpy arrays or torch tensors and returns a 0-d tensor,
so the same code serves training (autograd) and plain evaluation
(``float(loss)``).
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F

from mtlab import boxes as bx
from mtlab.errors import ArgumentError

PROB_CLAMP = 1e-7
DICE_EPS = 1e-6
SMOOTH_L1_BETA = 1.0
COMPONENTS = ("classif", "segm", "recon", "detect")


def _t(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float64)


def cce(pred, target) -> torch.Tensor:
    """Categorical cross-entropy on probabilities, clamped at 1e-7.

    ``pred`` is (3,) or (N, 3); ``target`` a class index or (N,) indices.
    Batched input returns the mean.
    """
    pred = _t(pred)
    target_t = torch.as_tensor(target, dtype=torch.long)
    batched = pred.dim() == 2
    pred2 = pred if batched else pred[None]
    tgt = target_t.reshape(-1)
    if tgt.numel() != pred2.shape[0] or bool(((tgt < 0) | (tgt >= pred2.shape[1])).any()):
        raise ArgumentError(f"invalid target index {target!r} for {pred2.shape[1]} classes")
    picked = pred2.gather(1, tgt[:, None])[:, 0]
    return -torch.log(picked.clamp(min=PROB_CLAMP)).mean()


def cce_from_logits(logits, target) -> torch.Tensor:
    return cce(torch.softmax(logits, dim=-1), target)


def generalized_dice(pred, target) -> torch.Tensor:
    """Two-class (lesion, background) generalised Dice loss with 1/volume^2 weights.

    For stacked input (N, H, W) the per-image losses are averaged.  Epsilon
    only guards the class weights: the denominator is at least 2*pixels*min(w),
    so smoothing it would just bias the perfect-overlap value away from 0.
    """
    pred = _t(pred)
    target = _t(target, pred.dtype)
    if pred.shape != target.shape:
        raise ArgumentError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if pred.dim() == 2:
        pred, target = pred[None], target[None]
    p = torch.stack([pred, 1 - pred], dim=1).flatten(2)      # (N, 2, pixels)
    r = torch.stack([target, 1 - target], dim=1).flatten(2)
    w = 1.0 / (r.sum(dim=2) ** 2 + DICE_EPS)
    num = (w * (r * p).sum(dim=2)).sum(dim=1)
    den = (w * (r + p).sum(dim=2)).sum(dim=1)
    return (1.0 - 2.0 * num / den).mean()


def mse(pred, target) -> torch.Tensor:
    pred = _t(pred)
    target = _t(target, pred.dtype)
    if pred.shape != target.shape:
        raise ArgumentError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


def _bce_logits(logits, labels):
    prob = torch.sigmoid(logits).clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    return -(labels * torch.log(prob) + (1 - labels) * torch.log(1 - prob)).mean()


def _smooth_l1(diff):
    a = diff.abs()
    return torch.where(a < SMOOTH_L1_BETA, 0.5 * a ** 2 / SMOOTH_L1_BETA,
                       a - 0.5 * SMOOTH_L1_BETA).sum(dim=1).mean()


@dataclass
class DetectionLossBundle:
    l_rpn_and_head_classif: object
    l_bbox: object
    l_mask: object

    @property
    def l_detect(self):
        return self.l_rpn_and_head_classif + self.l_bbox + self.l_mask


def _zero(like):
    return like.sum() * 0.0


def detection_loss(proposals, head_outputs, ground_truth_instances, cfg=None) -> DetectionLossBundle:
    """Sum of objectness+class cross-entropy, smooth-L1 box and mask BCE terms for one image.

    Targets are assigned here from ``ground_truth_instances`` by IoU; the
    caller decides which anchors and RoIs take part.  Without positives the
    box and mask terms are exactly zero.
    """
    from mtlab.nets.detector import DEFAULT_CONFIG, label_anchors, label_rois

    cfg = cfg or DEFAULT_CONFIG
    instances = ground_truth_instances or []
    gt_boxes = np.array([i.box for i in instances], dtype=np.float64).reshape(-1, 4)
    gt_classes = np.array([i.det_class.index for i in instances], dtype=np.int64)
    logits, deltas = proposals.rpn_logits, proposals.rpn_deltas

    a_labels, a_match = label_anchors(proposals.anchors, gt_boxes, cfg)
    counted = a_labels >= 0
    if counted.any():
        idx = torch.as_tensor(np.flatnonzero(counted))
        rpn_cls = _bce_logits(logits[idx], torch.as_tensor(a_labels[counted], dtype=logits.dtype))
    else:
        rpn_cls = _zero(logits)
    pos = np.flatnonzero(a_labels == 1)
    if len(pos):
        targets = bx.encode(gt_boxes[a_match[pos]], proposals.anchors[pos], bx.RPN_DELTA_WEIGHTS)
        rpn_box = _smooth_l1(deltas[torch.as_tensor(pos)] - torch.as_tensor(targets, dtype=deltas.dtype))
    else:
        rpn_box = _zero(deltas)

    cls_logits = head_outputs.class_logits
    r_labels, r_match = label_rois(proposals.rois, gt_boxes, gt_classes, cfg)
    if len(r_labels):
        head_cls = cce_from_logits(cls_logits, r_labels)
    else:
        head_cls = _zero(cls_logits)
    fg = np.flatnonzero(r_labels > 0)
    if len(fg):
        fg_t = torch.as_tensor(fg)
        rois_fg = np.asarray(proposals.rois, dtype=np.float64).reshape(-1, 4)[fg]
        targets = bx.encode(gt_boxes[r_match[fg]], rois_fg, bx.HEAD_DELTA_WEIGHTS)
        box_deltas = head_outputs.box_deltas
        head_box = _smooth_l1(box_deltas[fg_t] - torch.as_tensor(targets, dtype=box_deltas.dtype))
        mask_logits = head_outputs.mask_logits
        m = mask_logits.shape[-1]
        mask_targets = []
        for r, roi in zip(r_match[fg], rois_fg):
            gt_mask = torch.as_tensor(instances[r].mask, dtype=torch.float64)[None, None]
            crop = bx.roi_align(gt_mask, roi[None], m, 1.0)[0, 0]
            mask_targets.append((crop >= 0.5).to(mask_logits.dtype))
        chosen = mask_logits[fg_t, torch.as_tensor(gt_classes[r_match[fg]])]
        l_mask = _bce_logits(chosen, torch.stack(mask_targets))
    else:
        head_box = _zero(head_outputs.box_deltas)
        l_mask = _zero(head_outputs.mask_logits)
    return DetectionLossBundle(rpn_cls + head_cls, rpn_box + head_box, l_mask)


@dataclass(frozen=True)
class TaskWeights:
    """Binary switches for the classification, segmentation, reconstruction and detection losses."""

    w1: int = 0
    w2: int = 0
    w3: int = 0
    w4: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v not in (0, 1) or isinstance(v, float) and not float(v).is_integer():
                raise ArgumentError(f"task weight {f.name} must be 0 or 1, got {v!r}")
            object.__setattr__(self, f.name, int(v))

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.w1, self.w2, self.w3, self.w4)

    def active(self) -> tuple[str, ...]:
        return tuple(c for c, w in zip(COMPONENTS, self.as_tuple()) if w)


@dataclass
class LossBundle:
    l_classif: object = None
    l_segm: object = None
    l_recon: object = None
    l_detect: object = None
    l_total: object = 0.0

    def components(self) -> dict:
        return {c: getattr(self, "l_" + c) for c in COMPONENTS}

    def as_floats(self) -> "LossBundle":
        def conv(v):
            if v is None:
                return None
            return float(v.detach()) if torch.is_tensor(v) else float(v)

        return LossBundle(*(conv(getattr(self, "l_" + c)) for c in COMPONENTS),
                          l_total=conv(self.l_total))


def total_loss(components, weights: TaskWeights) -> LossBundle:
    """``w1*L_classif + w2*L_segm + w3*L_recon + w4*L_detect`` over the weighted terms.

    ``components`` is a mapping with keys among ``classif, segm, recon,
    detect`` (or a :class:`LossBundle`).  Terms with weight 0 are carried in
    the bundle but do not enter the total.
    """
    if isinstance(components, LossBundle):
        components = components.components()
    unknown = set(components) - set(COMPONENTS)
    if unknown:
        raise ArgumentError(f"unknown loss components {sorted(unknown)}")
    total = 0.0
    for name, w in zip(COMPONENTS, weights.as_tuple()):
        value = components.get(name)
        if w == 0:
            continue
        if value is None:
            raise ArgumentError(f"weight for '{name}' is 1 but the component is absent")
        total = total + value
    return LossBundle(*(components.get(c) for c in COMPONENTS), l_total=total)
