from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from mtlab.boxes import mask_to_box
from mtlab.errors import ArgumentError


class ClassLabel(str, enum.Enum):
    """Image-level class; mirrors non-covid / covid-19 / cancer."""

    NON_LESION = "non_lesion"
    DIFFUSE = "diffuse"
    NODULE = "nodule"

    @property
    def index(self) -> int:
        return _CLASS_ORDER.index(self)

    @classmethod
    def from_index(cls, i: int) -> "ClassLabel":
        return _CLASS_ORDER[i]


class DetClass(str, enum.Enum):
    """Instance-level lesion type; mirrors GGO / consolidation / pleural effusion."""

    GGO_LIKE = "GGO_like"
    CONSOLIDATION_LIKE = "consolidation_like"
    EFFUSION_LIKE = "effusion_like"

    @property
    def index(self) -> int:
        return _DET_ORDER.index(self)

    @classmethod
    def from_index(cls, i: int) -> "DetClass":
        return _DET_ORDER[i]


_CLASS_ORDER = list(ClassLabel)
_DET_ORDER = list(DetClass)

CLASS_NAMES = tuple(c.value for c in ClassLabel)
DET_CLASS_NAMES = tuple(c.value for c in DetClass)


class TaskProfile(str, enum.Enum):
    CR = "CR"
    SR = "SR"
    DR = "DR"


@dataclass(eq=False)
class Instance:
    """One annotated lesion: its class, tight box and full-image binary mask."""

    det_class: DetClass
    mask: np.ndarray
    box: tuple[int, int, int, int] | None = None

    def __post_init__(self):
        self.det_class = DetClass(self.det_class)
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        tight = mask_to_box(self.mask)
        if tight is None:
            raise ArgumentError("instance mask is empty")
        if self.box is None:
            self.box = tight
        self.box = tuple(int(v) for v in self.box)
        if self.box != tight:
            raise ArgumentError(f"box {self.box} is not the tight rectangle {tight} of its mask")

    def __eq__(self, other):
        if not isinstance(other, Instance):
            return NotImplemented
        return (self.det_class == other.det_class and self.box == other.box
                and np.array_equal(self.mask, other.mask))


@dataclass(eq=False)
class Sample:
    """A single 2D slice with whichever annotations its task profile provides.

    The reconstruction target is always the image itself.
    """

    image: np.ndarray
    sample_id: str
    class_label: ClassLabel | None = None
    seg_mask: np.ndarray | None = None
    instances: list[Instance] | None = None

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.ndim != 2:
            raise ArgumentError(f"image must be 2D, got shape {self.image.shape}")
        if self.class_label is not None:
            self.class_label = ClassLabel(self.class_label)
        if self.seg_mask is not None:
            self.seg_mask = np.asarray(self.seg_mask, dtype=np.uint8)
            if self.seg_mask.shape != self.image.shape:
                raise ArgumentError("seg_mask shape differs from image shape")

    @property
    def has_class(self) -> bool:
        return self.class_label is not None

    @property
    def has_seg(self) -> bool:
        return self.seg_mask is not None

    @property
    def has_instances(self) -> bool:
        return self.instances is not None

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        if (self.sample_id, self.class_label) != (other.sample_id, other.class_label):
            return False
        if self.image.dtype != other.image.dtype or not np.array_equal(self.image, other.image):
            return False
        if (self.seg_mask is None) != (other.seg_mask is None):
            return False
        if self.seg_mask is not None and not np.array_equal(self.seg_mask, other.seg_mask):
            return False
        return self.instances == other.instances


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float
    valid_fraction: float
    test_fraction: float
    seed: int = 0

    def __post_init__(self):
        fractions = (self.train_fraction, self.valid_fraction, self.test_fraction)
        if any(f < 0 for f in fractions):
            raise ArgumentError(f"split fractions must be nonnegative: {fractions}")
        if abs(sum(fractions) - 1.0) > 1e-9:
            raise ArgumentError(f"split fractions must sum to 1, got {sum(fractions)!r}")

    @classmethod
    def from_counts(cls, train: int, valid: int, test: int, seed: int = 0) -> "SplitSpec":
        total = train + valid + test
        return cls(train / total, valid / total, test / total, seed)


# Reference split counts (train, valid, test).
TABLE1_COUNTS = {
    TaskProfile.CR: (1331, 244, 241),
    TaskProfile.SR: (377, 48, 47),
    TaskProfile.DR: (79, 10, 10),
}
