"""Gradient steps, evaluation passes and the per-stage training loop."""
from __future__ import annotations

import copy
import math
import logging
from dataclasses import dataclass

import numpy as np
import torch

from mtlab import losses as L
from mtlab import metrics as M
from mtlab.datakit.augment import augment
from mtlab.datakit.types import Sample
from mtlab.errors import ArgumentError, ConfigurationError, NumericalError, StateError
from mtlab.nets import detector as det
from mtlab.nets.model import cls_logits, decoder_logits, encoder_forward, to_torch
from mtlab.nets.store import ParameterStore
from mtlab.trainer.config import StageConfig
from mtlab.trainer.curves import EpochRecord, TrainingCurve
from mtlab.trainer.optim import AdamState, adam_update

log = logging.getLogger(__name__)

EVAL_BATCH = 16
_HEAD_FOR = {"classif": "cls", "segm": "seg", "recon": "recon", "detect": "det"}


@dataclass
class Batch:
    x: torch.Tensor                 # (N, 1, H, W)
    labels: torch.Tensor | None
    masks: torch.Tensor | None
    instances: list | None

    @classmethod
    def from_samples(cls, samples: list[Sample], dtype=torch.float32) -> "Batch":
        if not samples:
            raise ArgumentError("batch must be nonempty")
        x = torch.as_tensor(np.stack([s.image for s in samples])[:, None], dtype=dtype)
        labels = masks = instances = None
        if all(s.has_class for s in samples):
            labels = torch.as_tensor([s.class_label.index for s in samples], dtype=torch.long)
        if all(s.has_seg for s in samples):
            masks = torch.as_tensor(np.stack([s.seg_mask for s in samples]), dtype=dtype)
        if all(s.has_instances for s in samples):
            instances = [s.instances for s in samples]
        return cls(x, labels, masks, instances)

    def __len__(self):
        return self.x.shape[0]


@dataclass
class Outputs:
    cls_probs: torch.Tensor | None = None
    seg_probs: torch.Tensor | None = None
    recon: torch.Tensor | None = None
    det_sampling: list | None = None


def check_annotations(samples, weights: L.TaskWeights, where: str = "data") -> None:
    needs = {"classif": ("has_class", "class labels"), "segm": ("has_seg", "segmentation masks"),
             "detect": ("has_instances", "instance annotations")}
    for comp in weights.active():
        if comp not in needs:
            continue
        attr, what = needs[comp]
        missing = [s.sample_id for s in samples if not getattr(s, attr)]
        if missing:
            raise ConfigurationError(f"{where}: task '{comp}' is active but {len(missing)} "
                                     f"sample(s) lack {what} (e.g. {missing[0]})")


def batch_loss(p: dict, batch: Batch, weights: L.TaskWeights, spec, rng=None,
               det_fixed=None, det_cfg=det.DEFAULT_CONFIG, det_exhaustive=False):
    """Forward the active heads and combine their losses.

    Returns ``(LossBundle of tensors, Outputs)``.
    """
    levels = encoder_forward(p, batch.x, spec)
    comps, out = {}, Outputs()
    if weights.w1:
        probs = torch.softmax(cls_logits(p, levels), dim=1)
        comps["classif"] = L.cce(probs, batch.labels)
        out.cls_probs = probs
    if weights.w2:
        seg = torch.sigmoid(decoder_logits(p, levels, "seg"))
        comps["segm"] = L.generalized_dice(seg, batch.masks)
        out.seg_probs = seg
    if weights.w3:
        recon = decoder_logits(p, levels, "recon")
        comps["recon"] = L.mse(recon, batch.x[:, 0])
        out.recon = recon
    if weights.w4:
        rng = rng if rng is not None else np.random.default_rng(0)
        proposals, heads = det.train_forward(p, levels, batch.instances, spec, rng, det_cfg,
                                             det_fixed, det_exhaustive)
        per_image = [L.detection_loss(pr, ho, inst, det_cfg).l_detect
                     for pr, ho, inst in zip(proposals, heads, batch.instances)]
        comps["detect"] = torch.stack(per_image).mean()
        out.det_sampling = [(pr.anchor_index, pr.rois) for pr in proposals]
    return L.total_loss(comps, weights), out


def _require_heads(params: ParameterStore, weights: L.TaskWeights):
    for comp in weights.active():
        head = _HEAD_FOR[comp]
        if head not in params.heads:
            raise StateError(f"loss '{comp}' is active but the store has no '{head}.*' parameters")


def _store_from_tensors(p: dict, like: ParameterStore, meta=None) -> ParameterStore:
    return like.replace({n: t.detach().numpy().copy() for n, t in p.items()}, meta)


def loss_and_grads(params: ParameterStore, samples, weights: L.TaskWeights, det_fixed=None,
                   seed: int = 0):
    """Loss bundle (floats), gradients (name -> array) and the detector sampling used."""
    _require_heads(params, weights)
    p = to_torch(params, requires_grad=True)
    dtype = p[next(iter(p))].dtype
    bundle, out = batch_loss(p, Batch.from_samples(list(samples), dtype), weights, params.spec,
                             np.random.default_rng(seed), det_fixed)
    grads = {}
    if torch.is_tensor(bundle.l_total) and bundle.l_total.requires_grad:
        bundle.l_total.backward()
        grads = {n: t.grad.numpy().copy() for n, t in p.items() if t.grad is not None}
    return bundle.as_floats(), grads, out.det_sampling


def loss_value(params: ParameterStore, samples, weights: L.TaskWeights, det_fixed=None,
               seed: int = 0) -> float:
    p = to_torch(params)
    dtype = p[next(iter(p))].dtype
    with torch.no_grad():
        bundle, _ = batch_loss(p, Batch.from_samples(list(samples), dtype), weights, params.spec,
                               np.random.default_rng(seed), det_fixed)
    return float(bundle.l_total)


def _check_finite(bundle: L.LossBundle, where: str):
    for comp, value in bundle.components().items():
        if value is not None and not bool(torch.isfinite(torch.as_tensor(value)).all()):
            raise NumericalError(f"non-finite {comp} loss {where}")
    if not bool(torch.isfinite(torch.as_tensor(bundle.l_total))):
        raise NumericalError(f"non-finite total loss {where}")


def _train_step(p: dict, batch: Batch, weights, spec, lr, state: AdamState, rng, where: str):
    for t in p.values():
        t.grad = None
    bundle, _ = batch_loss(p, batch, weights, spec, rng)
    _check_finite(bundle, where)
    if torch.is_tensor(bundle.l_total) and bundle.l_total.requires_grad:
        bundle.l_total.backward()
    grads = {}
    for name, t in p.items():
        if t.grad is None:
            continue
        if not bool(torch.isfinite(t.grad).all()):
            raise NumericalError(f"non-finite gradient for {name} {where}")
        grads[name] = t.grad
    if lr > 0 and grads:
        adam_update(p, grads, state, lr)
    return bundle.as_floats()


def step(params: ParameterStore, batch, weights: L.TaskWeights, learning_rate: float,
         state: AdamState | None = None, seed: int = 0):
    """One Adam update on ``batch`` (a list of samples).

    Returns ``(new_params, LossBundle, new_state)``; neither ``params`` nor
    ``state`` is modified.  Parameters without a gradient path are left
    bitwise unchanged.
    """
    samples = list(batch)
    if not samples:
        raise ArgumentError("batch must be nonempty")
    _require_heads(params, weights)
    state = AdamState() if state is None else copy.deepcopy(state)
    p = to_torch(params, requires_grad=True)
    dtype = p[next(iter(p))].dtype
    bundle = _train_step(p, Batch.from_samples(samples, dtype), weights, params.spec,
                         learning_rate, state, np.random.default_rng(seed), "in step")
    if learning_rate == 0:
        return params, bundle, state
    return _store_from_tensors(p, params), bundle, state


def predict(params: ParameterStore, samples, head: str) -> np.ndarray:
    """Batched float64 head outputs: class probabilities (N, 3) or lesion probabilities (N, S, S)."""
    if head not in ("cls", "seg", "recon"):
        raise ArgumentError(f"predict supports cls, seg and recon heads, not {head!r}")
    if head not in params.heads:
        raise StateError(f"parameter store has no '{head}.*' parameters")
    samples = list(samples)
    if not samples:
        raise ArgumentError("no samples to predict")
    p = to_torch(params)
    dtype = p[next(iter(p))].dtype
    outs = []
    with torch.no_grad():
        for start in range(0, len(samples), EVAL_BATCH):
            x = Batch.from_samples(samples[start:start + EVAL_BATCH], dtype).x
            levels = encoder_forward(p, x, params.spec)
            if head == "cls":
                out = torch.softmax(cls_logits(p, levels), dim=1)
            elif head == "seg":
                out = torch.sigmoid(decoder_logits(p, levels, "seg"))
            else:
                out = decoder_logits(p, levels, "recon")
            outs.append(out.double().numpy())
    return np.concatenate(outs)


def _metric(stage_metric: str, outs: list, samples: list[Sample], detections) -> float | None:
    if stage_metric == "accuracy":
        probs = np.concatenate([o.cls_probs.detach().double().numpy() for o in outs])
        return M.classification_report(probs, [s.class_label.index for s in samples]).accuracy
    if stage_metric == "dice":
        pred = np.concatenate([o.seg_probs.detach().double().numpy() for o in outs])
        return M.segmentation_report(pred, np.stack([s.seg_mask for s in samples])).f1
    return M.detection_report(detections, [s.instances for s in samples]).mean_ap


def evaluate(p: dict, samples: list[Sample], config: StageConfig, spec, dtype=torch.float32):
    """Mean loss components and the stage metric over ``samples`` at fixed parameters.

    The detection loss is computed without subsampling so the value has
    no random component.
    """
    if not samples:
        return None, None
    weights = config.weights
    sums: dict = {}
    outs, detections = [], []
    with torch.no_grad():
        for start in range(0, len(samples), EVAL_BATCH):
            chunk = samples[start:start + EVAL_BATCH]
            batch = Batch.from_samples(chunk, dtype)
            bundle, out = batch_loss(p, batch, weights, spec, det_exhaustive=True)
            outs.append(out)
            for comp, value in bundle.components().items():
                if value is not None:
                    sums[comp] = sums.get(comp, 0.0) + float(value) * len(chunk)
            if weights.w4:
                levels = encoder_forward(p, batch.x, spec)
                _, logits, deltas = det.rpn_forward(p, levels[4])
                f = det.roi_features(p, levels)
                for i in range(len(chunk)):
                    detections.append(det.detect_image(p, f[i:i + 1], logits[i], deltas[i],
                                                       spec, 0.05, 20))
    means = {comp: total / len(samples) for comp, total in sums.items()}
    bundle = L.total_loss(means, weights)
    return bundle, _metric(config.metric_name, outs, samples, detections)


def step_rate(config: StageConfig, k: int, total: int) -> float:
    if config.lr_schedule == "cosine":
        return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * k / total))
    return config.learning_rate


@dataclass
class StageResult:
    params: ParameterStore
    curve: TrainingCurve
    best_params: ParameterStore
    best_epoch: int


def run_stage(config: StageConfig, data, params: ParameterStore, progress=None) -> StageResult:
    """Train ``params`` for ``config.epochs`` epochs on ``data = (train, valid[, test])``.

    Each epoch ends with an evaluation pass over the training and
    validation splits (no augmentation); those values form the curve.  The
    best checkpoint is the one with the lowest validation total loss
    (training total if there is no validation split).
    """
    train, valid = list(data[0]), list(data[1]) if len(data) > 1 else []
    weights = config.weights
    if not train:
        raise ConfigurationError("training split is empty")
    check_annotations(train, weights, "training split")
    check_annotations(valid, weights, "validation split")
    _require_heads(params, weights)
    if params.spec.input_size != train[0].image.shape[0]:
        raise ConfigurationError(f"backbone expects {params.spec.input_size}px slices, data has "
                                 f"{train[0].image.shape[0]}px")
    curve = TrainingCurve()
    if config.epochs == 0:
        return StageResult(params, curve, params, 0)

    spec = params.spec
    p = to_torch(params, requires_grad=True)
    dtype = p[next(iter(p))].dtype
    order_rng = np.random.default_rng([config.seed, 1])
    det_rng = np.random.default_rng([config.seed, 2])
    state = AdamState()
    best_score, best_epoch, best_params = np.inf, 0, params
    meta = {"stage": config.stage, "seed": config.seed}
    total_steps = math.ceil(len(train) / config.batch_size) * config.epochs
    n_step = 0
    for epoch in range(1, config.epochs + 1):
        order = order_rng.permutation(len(train))
        for start in range(0, len(train), config.batch_size):
            chunk = [train[i] for i in order[start:start + config.batch_size]]
            if config.augmentations:
                chunk = [augment(s, config.augmentations, int(order_rng.integers(2 ** 31)))
                         for s in chunk]
            _train_step(p, Batch.from_samples(chunk, dtype), weights, spec,
                        step_rate(config, n_step, total_steps), state, det_rng,
                        f"at epoch {epoch}")
            n_step += 1
        tr_bundle, tr_metric = evaluate(p, train, config, spec, dtype)
        va_bundle, va_metric = evaluate(p, valid, config, spec, dtype)
        _check_finite(tr_bundle, f"at epoch {epoch} (training evaluation)")
        curve.records.append(EpochRecord(epoch, "train", tr_bundle, config.metric_name, tr_metric))
        score = tr_bundle.l_total
        if va_bundle is not None:
            _check_finite(va_bundle, f"at epoch {epoch} (validation evaluation)")
            curve.records.append(EpochRecord(epoch, "valid", va_bundle, config.metric_name,
                                             va_metric))
            score = va_bundle.l_total
        if score < best_score:
            best_score, best_epoch = score, epoch
            best_params = _store_from_tensors(p, params, {**meta, "epoch": epoch})
        log.info("%s epoch %d: train %.4f valid %s metric %s", config.stage, epoch,
                 tr_bundle.l_total, None if va_bundle is None else round(va_bundle.l_total, 4),
                 tr_metric)
        if progress is not None:
            progress(epoch, curve)
    final = _store_from_tensors(p, params, {**meta, "epoch": config.epochs})
    return StageResult(final, curve, best_params, best_epoch)
