"""On-disk dataset layout.

::

    DIR/manifest.json              schema version + one entry per sample
    DIR/images/<id>.png            16-bit grayscale image
    DIR/masks/<id>.png             8-bit binary lesion mask (0/255), optional
    DIR/instances/<id>.json        [{det_class, box, mask}], optional
    DIR/instances/<id>_<k>.png     8-bit instance masks
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from mtlab.datakit.preprocessing import from_uint16, to_uint16
from mtlab.datakit.types import Instance, Sample
from mtlab.errors import DatasetFormatError, DatasetIOError

SCHEMA_VERSION = 1
MANIFEST = "manifest.json"


def _write_png(path: Path, array: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path)


def _read_png(path: Path, dtype) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.array(im)
    except FileNotFoundError:
        raise DatasetIOError(f"missing file: {path}") from None
    except OSError as exc:
        raise DatasetIOError(f"unreadable image {path}: {exc}") from exc
    if arr.dtype != dtype or arr.ndim != 2:
        raise DatasetFormatError(f"{path}: expected 2D {np.dtype(dtype).name} PNG, "
                                 f"got {arr.dtype} with shape {arr.shape}")
    return arr


def _read_json(path: Path):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DatasetIOError(f"missing file: {path}") from None
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: invalid JSON ({exc})") from exc


def save_dataset(samples: list[Sample], directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        entry = {"sample_id": s.sample_id,
                 "class_label": None if s.class_label is None else s.class_label.value,
                 "image": f"images/{s.sample_id}.png", "seg_mask": None, "instances": None}
        _write_png(directory / entry["image"], to_uint16(s.image))
        if s.seg_mask is not None:
            entry["seg_mask"] = f"masks/{s.sample_id}.png"
            _write_png(directory / entry["seg_mask"], s.seg_mask.astype(np.uint8) * 255)
        if s.instances is not None:
            records = []
            for k, inst in enumerate(s.instances):
                mask_path = f"instances/{s.sample_id}_{k}.png"
                _write_png(directory / mask_path, inst.mask.astype(np.uint8) * 255)
                records.append({"det_class": inst.det_class.value, "box": list(inst.box),
                                "mask": mask_path})
            entry["instances"] = f"instances/{s.sample_id}.json"
            (directory / entry["instances"]).write_text(json.dumps(records, indent=1),
                                                        encoding="utf-8")
        entries.append(entry)
    manifest = {"schema_version": SCHEMA_VERSION, "samples": entries}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return directory


def load_dataset(directory) -> list[Sample]:
    directory = Path(directory)
    manifest_path = directory / MANIFEST
    if not manifest_path.is_file():
        raise DatasetFormatError(f"{directory}: no {MANIFEST}")
    manifest = _read_json(manifest_path)
    if not isinstance(manifest, dict) or manifest.get("schema_version") != SCHEMA_VERSION:
        raise DatasetFormatError(f"{manifest_path}: unsupported schema version")
    entries = manifest.get("samples")
    if not isinstance(entries, list):
        raise DatasetFormatError(f"{manifest_path}: 'samples' must be a list")
    samples = []
    for entry in entries:
        try:
            sample_id, image_rel = entry["sample_id"], entry["image"]
            label, seg_rel, inst_rel = entry["class_label"], entry["seg_mask"], entry["instances"]
        except (KeyError, TypeError) as exc:
            raise DatasetFormatError(f"{manifest_path}: malformed sample entry {entry!r}") from exc
        image = from_uint16(_read_png(directory / image_rel, np.uint16))
        seg = None if seg_rel is None else (_read_png(directory / seg_rel, np.uint8) > 0)
        instances = None
        if inst_rel is not None:
            instances = []
            for rec in _read_json(directory / inst_rel):
                mask = _read_png(directory / rec["mask"], np.uint8) > 0
                try:
                    inst = Instance(rec["det_class"], mask.astype(np.uint8), tuple(rec["box"]))
                except (KeyError, ValueError) as exc:
                    raise DatasetFormatError(f"{directory / inst_rel}: {exc}") from exc
                instances.append(inst)
        try:
            samples.append(Sample(image, sample_id, class_label=label,
                                  seg_mask=None if seg is None else seg.astype(np.uint8),
                                  instances=instances))
        except ValueError as exc:
            raise DatasetFormatError(f"{manifest_path}: sample {sample_id}: {exc}") from exc
    return samples
