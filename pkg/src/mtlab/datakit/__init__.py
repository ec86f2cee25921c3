"""Synthetic data, preprocessing, splitting, augmentation and dataset I/O."""
from mtlab.datakit.augment import AUGMENT_OPS, augment, crop, elastic, rotate
from mtlab.datakit.io import load_dataset, save_dataset
from mtlab.datakit.phantoms import as_profile, generate_phantoms
from mtlab.datakit.preprocessing import equalize_histogram, preprocess
from mtlab.datakit.splits import split, split_sizes
from mtlab.datakit.types import (
    CLASS_NAMES,
    DET_CLASS_NAMES,
    TABLE1_COUNTS,
    ClassLabel,
    DetClass,
    Instance,
    Sample,
    SplitSpec,
    TaskProfile,
)

__all__ = [
    "AUGMENT_OPS", "CLASS_NAMES", "DET_CLASS_NAMES", "TABLE1_COUNTS", "ClassLabel",
    "DetClass", "Instance", "Sample", "SplitSpec", "TaskProfile", "as_profile", "augment",
    "crop", "elastic", "equalize_histogram", "generate_phantoms", "load_dataset",
    "preprocess", "rotate", "save_dataset", "split", "split_sizes",
]
