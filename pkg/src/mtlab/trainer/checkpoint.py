"""Checkpoint directories: parameter store plus the curve that produced it."""
from __future__ import annotations

from pathlib import Path

from mtlab.errors import DatasetFormatError
from mtlab.nets.store import BackboneSpec, ParameterStore, load_params, save_params
from mtlab.trainer.curves import TrainingCurve

CURVE_FILE = "curve.csv"


def save_checkpoint(params: ParameterStore, curve: TrainingCurve | None, path) -> Path:
    path = save_params(params, path)
    (curve or TrainingCurve()).save(path / CURVE_FILE)
    return path


def load_checkpoint(path, expected: BackboneSpec | None = None):
    """Return ``(params, curve)``.

    A checkpoint written without a curve file loads with an empty curve.
    Truncated or inconsistent files raise :class:`DatasetFormatError`; a
    backbone other than ``expected`` raises :class:`TransferError`.
    """
    path = Path(path)
    if not path.is_dir():
        raise DatasetFormatError(f"checkpoint directory not found: {path}")
    params = load_params(path, expected)
    curve_path = path / CURVE_FILE
    curve = TrainingCurve.load(curve_path) if curve_path.is_file() else TrainingCurve()
    return params, curve
