"""Shared encoder, task heads and the parameter store that holds them.

The functions exported here take a :class:`ParameterStore` and numpy arrays
and return numpy arrays; training code uses the tensor-level functions in
:mod:`mtlab.nets.model` and :mod:`mtlab.nets.detector` directly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from mtlab.errors import ArgumentError, StateError
from mtlab.nets import detector as _det
from mtlab.nets.detector import (DEFAULT_CONFIG, Detection, DetectorConfig, HeadOutputs,
                                 Proposals, make_anchors)
from mtlab.nets.model import cls_logits, decoder_logits, encoder_forward, to_torch
from mtlab.boxes import nms
from mtlab.nets.store import (HEADS, BackboneSpec, ParameterStore, init_params, load_params,
                              param_shapes, save_params, transfer_weights)

_SIGMOID_CLIP = 30.0


@dataclass(eq=False)
class FeaturePyramid:
    """Encoder outputs, finest first; each level is (C, h, w)."""

    levels: list

    @property
    def shapes(self) -> list[tuple[int, int, int]]:
        return [tuple(level.shape) for level in self.levels]

    def _tensors(self, dtype):
        return [torch.as_tensor(np.asarray(level), dtype=dtype)[None] for level in self.levels]


def _require(params: ParameterStore, prefix: str):
    if not params.has_prefix(prefix):
        raise StateError(f"parameter store has no '{prefix}.*' parameters")


def _torch_dtype(params):
    return torch.float64 if params.dtype == np.float64 else torch.float32


def encode(params: ParameterStore, image) -> FeaturePyramid:
    """Run the shared encoder on one ``S x S`` (or ``S x S x 1``) slice."""
    _require(params, "encoder")
    image = np.asarray(image)
    size = params.spec.input_size
    if image.shape not in ((size, size), (size, size, 1)):
        raise ArgumentError(f"expected a {size}x{size}x1 image, got shape {image.shape}")
    x = torch.as_tensor(image.reshape(1, 1, size, size), dtype=_torch_dtype(params))
    with torch.no_grad():
        levels = encoder_forward(to_torch(params), x, params.spec)
    return FeaturePyramid([level[0].numpy() for level in levels])


def _decode(params, pyramid, head):
    _require(params, head)
    with torch.no_grad():
        return decoder_logits(to_torch(params), pyramid._tensors(_torch_dtype(params)), head)[0]


def decode_seg(params: ParameterStore, pyramid: FeaturePyramid) -> np.ndarray:
    """Lesion probability map, strictly inside (0, 1)."""
    logits = _decode(params, pyramid, "seg").double().clamp(-_SIGMOID_CLIP, _SIGMOID_CLIP)
    return torch.sigmoid(logits).numpy()


def decode_recon(params: ParameterStore, pyramid: FeaturePyramid) -> np.ndarray:
    """Reconstructed slice; linear output, deliberately unclamped."""
    return _decode(params, pyramid, "recon").numpy()


def decode_cls(params: ParameterStore, pyramid: FeaturePyramid) -> np.ndarray:
    """Class probabilities (non_lesion, diffuse, nodule)."""
    _require(params, "cls")
    with torch.no_grad():
        logits = cls_logits(to_torch(params), pyramid._tensors(_torch_dtype(params)))
    return torch.softmax(logits.double(), dim=1)[0].numpy()


def detect(params: ParameterStore, pyramid: FeaturePyramid, score_threshold: float = 0.5,
           max_detections: int = 10, cfg: DetectorConfig = DEFAULT_CONFIG) -> list[Detection]:
    """Detections sorted by descending score after per-class NMS at IoU 0.5."""
    if not 0.0 <= score_threshold <= 1.0:
        raise ArgumentError(f"score_threshold must lie in [0, 1], got {score_threshold}")
    if max_detections < 0:
        raise ArgumentError("max_detections must be nonnegative")
    _require(params, "det")
    p = to_torch(params)
    with torch.no_grad():
        levels = pyramid._tensors(_torch_dtype(params))
        _, logits, deltas = _det.rpn_forward(p, levels[4])
        f = _det.roi_features(p, levels)
    return _det.detect_image(p, f, logits[0], deltas[0], params.spec, score_threshold,
                             max_detections, cfg)


__all__ = [
    "HEADS", "BackboneSpec", "Detection", "DetectorConfig", "FeaturePyramid", "HeadOutputs",
    "ParameterStore", "Proposals", "decode_cls", "decode_recon", "decode_seg", "detect",
    "encode", "init_params", "load_params", "make_anchors", "nms", "param_shapes",
    "save_params", "transfer_weights",
]
