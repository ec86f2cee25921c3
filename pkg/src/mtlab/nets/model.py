"""Functional forward passes over a dict of torch tensors keyed like a ParameterStore.

All tensors are NCHW.  Nothing here owns state: the same functions serve
inference (parameters converted from a store) and training (leaf tensors
with ``requires_grad``).
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from mtlab.nets.store import BackboneSpec, ParameterStore

Params = dict  # name -> torch.Tensor


def to_torch(params: ParameterStore, requires_grad: bool = False) -> Params:
    out = {}
    for name, arr in params.items():
        t = torch.from_numpy(np.array(arr))
        out[name] = t.requires_grad_(requires_grad)
    return out


def conv(x, p: Params, name: str, stride: int = 1):
    w = p[name + ".weight"]
    return F.conv2d(x, w, p[name + ".bias"], stride=stride, padding=w.shape[-1] // 2)


def linear(x, p: Params, name: str):
    return F.linear(x, p[name + ".weight"], p[name + ".bias"])


def _vgg_encoder(p: Params, x):
    levels = []
    for s in range(1, 6):
        if s > 1:
            x = F.max_pool2d(x, 2)
        x = F.relu(conv(x, p, f"encoder.block{s}.conv1"))
        x = F.relu(conv(x, p, f"encoder.block{s}.conv2"))
        levels.append(x)
    return levels


def _bottleneck(p: Params, x, base: str, stride: int, project: bool):
    h = F.relu(conv(x, p, base + ".conv1"))
    h = F.relu(conv(h, p, base + ".conv2", stride=stride))
    h = conv(h, p, base + ".conv3")
    shortcut = conv(x, p, base + ".proj", stride=stride) if project else x
    return F.relu(h + shortcut)


def _resnet_encoder(p: Params, x, spec: BackboneSpec):
    x = F.relu(conv(x, p, "encoder.stem.conv"))
    levels = [x]
    for s, n_units in enumerate(spec.blocks, start=2):
        for u in range(1, n_units + 1):
            x = _bottleneck(p, x, f"encoder.block{s}.unit{u}", 2 if u == 1 else 1, u == 1)
        levels.append(x)
    return levels


def encoder_forward(p: Params, x, spec: BackboneSpec) -> list:
    """Five feature maps at strides 1, 2, 4, 8, 16."""
    if spec.kind == "vgg13_style":
        return _vgg_encoder(p, x)
    return _resnet_encoder(p, x, spec)


def decoder_logits(p: Params, levels: list, head: str):
    """U-Net expanding path with a skip from every encoder level; 1-channel logits."""
    adapt = f"{head}.adapt0.weight" in p
    if adapt:
        levels = [conv(f, p, f"{head}.adapt{i}") for i, f in enumerate(levels)]
    x = levels[4]
    for level in (3, 2, 1, 0):
        x = F.conv_transpose2d(x, p[f"{head}.up{level}.weight"], p[f"{head}.up{level}.bias"],
                               stride=2)
        x = torch.cat([x, levels[level]], dim=1)
        x = F.relu(conv(x, p, f"{head}.dec{level}.conv1"))
        x = F.relu(conv(x, p, f"{head}.dec{level}.conv2"))
    return conv(x, p, f"{head}.out")[:, 0]


def cls_logits(p: Params, levels: list):
    """Global average pool of the bottleneck, then three fully connected layers."""
    h = levels[4].mean(dim=(2, 3))
    h = F.relu(linear(h, p, "cls.fc1"))
    h = F.relu(linear(h, p, "cls.fc2"))
    return linear(h, p, "cls.fc3")
