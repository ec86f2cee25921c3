from __future__ import annotations

import numpy as np

from mtlab.datakit.types import Sample, SplitSpec
from mtlab.errors import ArgumentError


def split_sizes(n: int, spec: SplitSpec) -> tuple[int, int, int]:
    """Rounded validation/test sizes; whatever remains goes to training."""
    n_valid = int(round(spec.valid_fraction * n))
    n_test = int(round(spec.test_fraction * n))
    overflow = n_valid + n_test - n
    if overflow > 0:
        n_test -= overflow
    return n - n_valid - n_test, n_valid, n_test


def split(samples: list[Sample], spec: SplitSpec):
    """Seeded shuffle followed by a train/valid/test partition."""
    if len(samples) == 0:
        raise ArgumentError("cannot split an empty sample list")
    n_train, n_valid, _ = split_sizes(len(samples), spec)
    order = np.random.default_rng(spec.seed).permutation(len(samples))
    shuffled = [samples[i] for i in order]
    return (shuffled[:n_train], shuffled[n_train:n_train + n_valid],
            shuffled[n_train + n_valid:])
