"""Synthetic chest-slice phantoms with known lesion geometry.

Every phantom is a body ellipse holding two dark lung fields.  Depending on
the task profile, lesions are painted into the lungs:

* CR: image-level class only.  ``non_lesion`` is clean lung, ``diffuse`` adds
  several faint blobs, ``nodule`` adds one compact bright disc.
* SR: one to three faint irregular blobs, unioned into a binary lesion mask.
* DR: separate instances of three kinds (faint blob, dense blob, crescent
  effusion along the bottom of a lung), each with its own mask.
"""
from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from mtlab.datakit.preprocessing import TARGET_SIZE, preprocess
from mtlab.datakit.types import ClassLabel, DetClass, Instance, Sample, TaskProfile
from mtlab.errors import ArgumentError

_BODY = 0.55
_LUNG = 0.12
_MAX_TRIES = 50


def _grid(size: int):
    c = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    return np.meshgrid(c, c)  # (u: columns, v: rows), both in [-1, 1]


def _ellipse(u, v, cx, cy, ax, ay):
    return ((u - cx) / ax) ** 2 + ((v - cy) / ay) ** 2 <= 1.0


class _Anatomy:
    def __init__(self, size: int, rng: np.random.Generator):
        self.size = size
        self.u, self.v = _grid(size)
        jitter = rng.uniform(-0.03, 0.03, size=6)
        body = _ellipse(self.u, self.v, 0.0, 0.05, 0.88 + jitter[0], 0.72 + jitter[1])
        self.lungs = []
        for side, dx in ((-1, jitter[2]), (1, jitter[3])):
            spec = (side * 0.38 + dx, jitter[4], 0.28 + 0.5 * jitter[5], 0.5)
            self.lungs.append(spec)
        lung_mask = np.zeros((size, size), dtype=bool)
        for cx, cy, ax, ay in self.lungs:
            lung_mask |= _ellipse(self.u, self.v, cx, cy, ax, ay)
        self.lung_mask = lung_mask
        texture = gaussian_filter(rng.standard_normal((size, size)), sigma=max(size / 64, 0.5))
        texture /= max(float(np.abs(texture).max()), 1e-12)
        image = np.where(body, _BODY, 0.02)
        image = np.where(lung_mask, _LUNG, image)
        self.image = image + 0.03 * texture * body + 0.015 * rng.standard_normal((size, size))

    def point_in_lung(self, rng, margin: float = 0.75):
        cx, cy, ax, ay = self.lungs[rng.integers(2)]
        r = margin * np.sqrt(rng.uniform())
        t = rng.uniform(0, 2 * np.pi)
        return cx + r * ax * np.cos(t), cy + r * ay * np.sin(t)

    def blob(self, rng, radius: float):
        """Irregular lesion mask: a noise-perturbed disc clipped to the lungs."""
        cx, cy = self.point_in_lung(rng)
        d = np.sqrt((self.u - cx) ** 2 + (self.v - cy) ** 2) / radius
        wobble = gaussian_filter(rng.standard_normal(d.shape), sigma=max(self.size / 32, 0.5))
        wobble /= max(float(np.abs(wobble).max()), 1e-12)
        return (d + 0.25 * wobble <= 1.0) & self.lung_mask

    def disc(self, rng, radius: float):
        cx, cy = self.point_in_lung(rng, margin=0.6)
        return ((self.u - cx) ** 2 + (self.v - cy) ** 2 <= radius ** 2) & self.lung_mask

    def effusion(self, rng):
        cx, cy, ax, ay = self.lungs[rng.integers(2)]
        depth = rng.uniform(0.25, 0.4) * ay
        lung = _ellipse(self.u, self.v, cx, cy, ax, ay)
        return lung & (self.v >= cy + ay - depth)

    def paint(self, mask, delta: float, rng):
        soft = gaussian_filter(mask.astype(np.float64), sigma=max(self.size / 256, 0.4))
        grain = 1.0 + 0.15 * rng.standard_normal(mask.shape)
        self.image = self.image + delta * soft * grain


def as_profile(value) -> TaskProfile:
    if isinstance(value, TaskProfile):
        return value
    try:
        return TaskProfile(str(value).upper())
    except ValueError:
        raise ArgumentError(f"unknown task profile {value!r}") from None


def _min_pixels(size: int) -> int:
    return max(4, (size // 32) ** 2)


def _cr_sample(anat: _Anatomy, label: ClassLabel, rng) -> None:
    if label is ClassLabel.DIFFUSE:
        for _ in range(rng.integers(3, 7)):
            anat.paint(anat.blob(rng, rng.uniform(0.06, 0.12)), rng.uniform(0.12, 0.2), rng)
    elif label is ClassLabel.NODULE:
        for _ in range(_MAX_TRIES):
            disc = anat.disc(rng, rng.uniform(0.07, 0.11))
            if disc.sum() >= _min_pixels(anat.size):
                break
        anat.paint(disc, 0.5, rng)


def _sr_mask(anat: _Anatomy, rng) -> np.ndarray:
    mask = np.zeros((anat.size, anat.size), dtype=bool)
    for _ in range(rng.integers(1, 4)):
        for _ in range(_MAX_TRIES):
            blob = anat.blob(rng, rng.uniform(0.08, 0.16))
            if blob.sum() >= _min_pixels(anat.size):
                break
        mask |= blob
    anat.paint(mask, 0.22, rng)
    return mask


def _dr_instances(anat: _Anatomy, classes: list[DetClass], rng) -> list[tuple[DetClass, np.ndarray]]:
    occupied = np.zeros((anat.size, anat.size), dtype=bool)
    out = []
    for det_class in classes:
        for _ in range(_MAX_TRIES):
            if det_class is DetClass.GGO_LIKE:
                mask = anat.blob(rng, rng.uniform(0.1, 0.16))
            elif det_class is DetClass.CONSOLIDATION_LIKE:
                mask = anat.blob(rng, rng.uniform(0.08, 0.13))
            else:
                mask = anat.effusion(rng)
            grown = gaussian_filter(mask.astype(float), 1.0) > 0.01
            if mask.sum() >= _min_pixels(anat.size) and not (grown & occupied).any():
                break
        else:
            continue
        occupied |= mask
        delta = {DetClass.GGO_LIKE: 0.18, DetClass.CONSOLIDATION_LIKE: 0.45,
                 DetClass.EFFUSION_LIKE: 0.38}[det_class]
        anat.paint(mask, delta, rng)
        out.append((det_class, mask))
    return out


def generate_phantoms(count: int, task_profile, seed: int, size: int = TARGET_SIZE,
                      instances_per_sample: tuple[int, int] = (1, 3)) -> list[Sample]:
    """Deterministically generate ``count`` preprocessed phantom samples.

    ``instances_per_sample`` bounds the number of lesions per DR phantom
    (inclusive).  Image classes (CR) and instance classes (DR) are dealt
    round-robin in a seeded order so every class appears as evenly as the
    count allows.
    """
    if int(count) < 1:
        raise ArgumentError(f"count must be positive, got {count}")
    profile = as_profile(task_profile)
    lo, hi = instances_per_sample
    if not 1 <= lo <= hi:
        raise ArgumentError(f"invalid instances_per_sample {instances_per_sample}")
    rng = np.random.default_rng([seed, list(TaskProfile).index(profile), size])
    labels = [ClassLabel.from_index(i % 3) for i in range(count)]
    labels = [labels[i] for i in rng.permutation(count)]
    det_offset = int(rng.integers(3))
    det_counter = 0
    samples = []
    for i in range(count):
        srng = np.random.default_rng([seed, list(TaskProfile).index(profile), size, i])
        anat = _Anatomy(size, srng)
        sample_id = f"{profile.value.lower()}-{seed}-{i:05d}"
        if profile is TaskProfile.CR:
            _cr_sample(anat, labels[i], srng)
            image, _ = preprocess(np.clip(anat.image, 0, None), None, size)
            samples.append(Sample(image, sample_id, class_label=labels[i]))
        elif profile is TaskProfile.SR:
            mask = _sr_mask(anat, srng)
            image, mask = preprocess(np.clip(anat.image, 0, None), mask, size)
            samples.append(Sample(image, sample_id, seg_mask=mask))
        else:
            n = int(srng.integers(lo, hi + 1))
            classes = [DetClass.from_index((det_offset + det_counter + k) % 3) for k in range(n)]
            det_counter += n
            found = _dr_instances(anat, classes, srng)
            image, _ = preprocess(np.clip(anat.image, 0, None), None, size)
            instances = [Instance(c, m.astype(np.uint8)) for c, m in found]
            samples.append(Sample(image, sample_id, instances=instances))
    return samples
