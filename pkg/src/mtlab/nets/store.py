"""Named parameter arrays, their initialisation, transfer and on-disk format."""
from __future__ import annotations

import json
import zlib
from collections import OrderedDict
from collections.abc import Mapping
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from mtlab.errors import (ArgumentError, DatasetFormatError, DatasetIOError,
                          TransferError)

HEADS = ("cls", "seg", "recon", "det")
PREFIXES = ("encoder",) + HEADS

VGG13_CHANNELS = (64, 128, 256, 512, 512)
RESNET50_CHANNELS = (64, 256, 512, 1024, 2048)
RESNET50_BLOCKS = (3, 4, 6, 3)

_DTYPE_TAGS = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def _scaled(channels, width):
    return tuple(max(1, int(round(c * width))) for c in channels)


@dataclass(frozen=True)
class BackboneSpec:
    """Shared-encoder configuration.

    ``width`` multiplies every channel count; ``input_size`` is the square
    slice side the encoder accepts.  ``blocks`` is only used by the
    residual backbone (bottleneck units per downsampling stage).
    """

    kind: str = "vgg13_style"
    width: float = 1.0
    input_size: int = 256
    blocks: tuple[int, ...] = RESNET50_BLOCKS

    def __post_init__(self):
        if self.kind not in ("vgg13_style", "resnet50_style"):
            raise ArgumentError(f"unknown backbone kind {self.kind!r}")
        if self.width <= 0:
            raise ArgumentError("width multiplier must be positive")
        if self.input_size < 16 or self.input_size % 16:
            raise ArgumentError(f"input size must be a positive multiple of 16, got {self.input_size}")
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        if len(self.blocks) != 4 or min(self.blocks) < 1:
            raise ArgumentError(f"blocks must list 4 positive counts, got {self.blocks}")

    @property
    def stage_channels(self) -> tuple[int, ...]:
        base = VGG13_CHANNELS if self.kind == "vgg13_style" else RESNET50_CHANNELS
        return _scaled(base, self.width)

    @property
    def decoder_channels(self) -> tuple[int, ...]:
        return _scaled(VGG13_CHANNELS, self.width)

    @property
    def pyramid_shapes(self) -> list[tuple[int, int, int]]:
        return [(c, self.input_size >> i, self.input_size >> i)
                for i, c in enumerate(self.stage_channels)]

    @property
    def det_channels(self) -> int:
        return max(8, int(round(256 * self.width)))

    @property
    def det_hidden(self) -> int:
        return max(16, int(round(1024 * self.width)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = list(self.blocks)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "BackboneSpec":
        return cls(kind=d["kind"], width=float(d["width"]), input_size=int(d["input_size"]),
                   blocks=tuple(d.get("blocks", RESNET50_BLOCKS)))


def _conv(shapes, name, cout, cin, k):
    shapes[name + ".weight"] = (cout, cin, k, k)
    shapes[name + ".bias"] = (cout,)


def _linear(shapes, name, cout, cin):
    shapes[name + ".weight"] = (cout, cin)
    shapes[name + ".bias"] = (cout,)


def _encoder_shapes(spec: BackboneSpec, shapes):
    ch = spec.stage_channels
    if spec.kind == "vgg13_style":
        cin = 1
        for s, c in enumerate(ch, start=1):
            _conv(shapes, f"encoder.block{s}.conv1", c, cin, 3)
            _conv(shapes, f"encoder.block{s}.conv2", c, c, 3)
            cin = c
        return
    _conv(shapes, "encoder.stem.conv", ch[0], 1, 3)
    cin = ch[0]
    for s, (c, n_units) in enumerate(zip(ch[1:], spec.blocks), start=2):
        mid = max(1, c // 4)
        for u in range(1, n_units + 1):
            base = f"encoder.block{s}.unit{u}"
            _conv(shapes, base + ".conv1", mid, cin, 1)
            _conv(shapes, base + ".conv2", mid, mid, 3)
            _conv(shapes, base + ".conv3", c, mid, 1)
            if u == 1:
                _conv(shapes, base + ".proj", c, cin, 1)
            cin = c


def _decoder_shapes(spec: BackboneSpec, head: str, shapes):
    enc, dec = spec.stage_channels, spec.decoder_channels
    if enc != dec:
        for level, (ce, cd) in enumerate(zip(enc, dec)):
            _conv(shapes, f"{head}.adapt{level}", cd, ce, 1)
    for level in (3, 2, 1, 0):
        # transposed-conv weights are (in, out, k, k)
        shapes[f"{head}.up{level}.weight"] = (dec[level + 1], dec[level], 2, 2)
        shapes[f"{head}.up{level}.bias"] = (dec[level],)
        _conv(shapes, f"{head}.dec{level}.conv1", dec[level], 2 * dec[level], 3)
        _conv(shapes, f"{head}.dec{level}.conv2", dec[level], dec[level], 3)
    _conv(shapes, f"{head}.out", 1, dec[0], 1)


def _cls_shapes(spec: BackboneSpec, shapes):
    _linear(shapes, "cls.fc1", 256, spec.stage_channels[4])
    _linear(shapes, "cls.fc2", 64, 256)
    _linear(shapes, "cls.fc3", 3, 64)


def _det_shapes(spec: BackboneSpec, shapes, n_anchors=9, n_classes=3, pool=7):
    c, hid = spec.det_channels, spec.det_hidden
    _conv(shapes, "det.reduce", c, spec.stage_channels[4], 1)
    _conv(shapes, "det.rpn.conv", c, c, 3)
    _conv(shapes, "det.rpn.logits", n_anchors, c, 1)
    _conv(shapes, "det.rpn.deltas", 4 * n_anchors, c, 1)
    _conv(shapes, "det.roi_reduce", c, spec.stage_channels[2], 1)
    _linear(shapes, "det.box.fc1", hid, c * pool * pool)
    _linear(shapes, "det.box.fc2", hid, hid)
    _linear(shapes, "det.box.cls", n_classes + 1, hid)
    _linear(shapes, "det.box.deltas", 4, hid)
    _conv(shapes, "det.mask.conv1", c, c, 3)
    _conv(shapes, "det.mask.conv2", c, c, 3)
    _conv(shapes, "det.mask.out", n_classes, c, 1)


def param_shapes(spec: BackboneSpec, heads) -> OrderedDict:
    """Ordered ``name -> shape`` table for the encoder plus ``heads``."""
    shapes = OrderedDict()
    _encoder_shapes(spec, shapes)
    for head in HEADS:
        if head not in heads:
            continue
        if head in ("seg", "recon"):
            _decoder_shapes(spec, head, shapes)
        elif head == "cls":
            _cls_shapes(spec, shapes)
        else:
            _det_shapes(spec, shapes)
    return shapes


class ParameterStore(Mapping):
    """Immutable ordered map of parameter name to array, plus metadata.

    Arrays are flagged read-only; "updates" build a new store via
    :meth:`replace`.
    """

    def __init__(self, arrays, spec: BackboneSpec, meta: Mapping | None = None):
        self._arrays = OrderedDict()
        for name, arr in arrays.items():
            arr = np.array(arr, copy=True)
            arr.flags.writeable = False
            self._arrays[name] = arr
        self.spec = spec
        self.meta = dict(meta or {})

    def __getitem__(self, name):
        return self._arrays[name]

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def __repr__(self):
        return (f"ParameterStore({self.spec.kind}, heads={sorted(self.heads)}, "
                f"{len(self)} arrays, {self.size} values)")

    @property
    def heads(self) -> frozenset:
        return frozenset(n.split(".", 1)[0] for n in self._arrays) - {"encoder"}

    @property
    def size(self) -> int:
        return int(sum(a.size for a in self._arrays.values()))

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self._arrays.values())).dtype

    def has_prefix(self, prefix: str) -> bool:
        return any(_under(n, prefix) for n in self._arrays)

    def replace(self, updates: Mapping, meta: Mapping | None = None) -> "ParameterStore":
        unknown = set(updates) - set(self._arrays)
        if unknown:
            raise ArgumentError(f"unknown parameter names {sorted(unknown)[:5]}")
        arrays = OrderedDict((n, updates.get(n, a)) for n, a in self._arrays.items())
        merged = dict(self.meta)
        merged.update(meta or {})
        return ParameterStore(arrays, self.spec, merged)

    def astype(self, dtype) -> "ParameterStore":
        return ParameterStore({n: a.astype(dtype) for n, a in self._arrays.items()},
                              self.spec, self.meta)

    def equals(self, other: "ParameterStore") -> bool:
        """Bitwise equality of names, dtypes and values."""
        if list(self) != list(other):
            return False
        return all(a.dtype == other[n].dtype and a.tobytes() == other[n].tobytes()
                   for n, a in self._arrays.items())


def _under(name: str, prefix: str) -> bool:
    prefix = prefix.rstrip(".*")
    return name == prefix or name.startswith(prefix + ".")


def _name_seed(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])


def init_params(backbone: BackboneSpec, heads, seed: int, dtype=np.float32) -> ParameterStore:
    """He-uniform weights and zero biases, seeded per parameter name.

    The last convolution of each residual branch starts at zero so the
    norm-free residual encoder begins as a stack of identity/projection
    maps instead of blowing up with depth.  Because every array draws from its own ``(seed, name)`` stream, the
    encoder is identical for a given seed whatever heads are requested.
    """
    heads = set(heads)
    if not heads:
        raise ArgumentError("at least one head is required")
    unknown = heads - set(HEADS)
    if unknown:
        raise ArgumentError(f"unknown heads {sorted(unknown)}; expected {HEADS}")
    arrays = OrderedDict()
    for name, shape in param_shapes(backbone, heads).items():
        if name.endswith(".bias") or (".unit" in name and ".conv3." in name):
            arrays[name] = np.zeros(shape, dtype=dtype)
            continue
        if ".up" in name:
            fan_in = shape[0]  # stride-2, kernel-2 transposed conv: one tap per output
        else:
            fan_in = int(np.prod(shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        arrays[name] = _name_seed(seed, name).uniform(-bound, bound, size=shape).astype(dtype)
    return ParameterStore(arrays, backbone, {"seed": int(seed), "stage": "init"})


def transfer_weights(source: ParameterStore, target: ParameterStore, prefixes):
    """Copy every parameter under ``prefixes`` from ``source`` into a copy of ``target``.

    Returns ``(new_store, report)`` where ``report`` has ``copied`` and
    ``skipped`` name lists.  A prefix absent from both stores is skipped; a
    name present on only one side, or a shape mismatch, raises
    :class:`TransferError` naming the parameter.
    """
    prefixes = [p.rstrip(".*") for p in prefixes]
    copied, skipped, updates = [], [], {}
    for prefix in prefixes:
        names = [n for n in target if _under(n, prefix)]
        names += [n for n in source if _under(n, prefix) and n not in target]
        if not names:
            skipped.append(prefix)
            continue
        for name in names:
            if name not in source or name not in target:
                side = "source" if name not in source else "target"
                raise TransferError(f"{name} is missing from the {side} store "
                                    f"(backbones {source.spec.kind} -> {target.spec.kind})")
            if source[name].shape != target[name].shape:
                raise TransferError(f"shape mismatch for {name}: source {source[name].shape} "
                                    f"vs target {target[name].shape}")
            updates[name] = source[name].astype(target[name].dtype, copy=False)
            copied.append(name)
    if not updates:
        return target, {"copied": copied, "skipped": skipped}
    provenance = dict(target.meta.get("provenance", {}))
    for prefix in prefixes:
        provenance[prefix] = source.meta.get("stage", "external")
    new = target.replace(updates, {"provenance": provenance})
    return new, {"copied": copied, "skipped": skipped}


def save_params(params: ParameterStore, directory) -> Path:
    """Write ``manifest.json`` and ``weights.bin`` (little-endian, concatenated)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, offset, chunks = [], 0, []
    for name, arr in params.items():
        tag = "f64" if arr.dtype == np.float64 else "f32"
        raw = np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": tag,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    (directory / "weights.bin").write_bytes(b"".join(chunks))
    manifest = {"format": "mtlab-params", "version": 1, "backbone": params.spec.to_dict(),
                "meta": params.meta, "total_bytes": offset, "params": entries}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True),
                                             encoding="utf-8")
    return directory


def load_params(directory, expected: BackboneSpec | None = None) -> ParameterStore:
    directory = Path(directory)
    manifest_path, weights_path = directory / "manifest.json", directory / "weights.bin"
    if not manifest_path.is_file():
        raise DatasetFormatError(f"{directory}: no manifest.json")
    if not weights_path.is_file():
        raise DatasetIOError(f"missing file: {weights_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        spec = BackboneSpec.from_dict(manifest["backbone"])
        entries = manifest["params"]
        total = int(manifest["total_bytes"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"{manifest_path}: malformed checkpoint manifest ({exc})") from exc
    blob = weights_path.read_bytes()
    if len(blob) != total:
        raise DatasetFormatError(f"{weights_path}: expected {total} bytes, found {len(blob)}")
    if expected is not None and expected != spec:
        raise TransferError(f"checkpoint backbone {spec} does not match expected {expected}")
    arrays = OrderedDict()
    for e in entries:
        try:
            dtype = _DTYPE_TAGS[e["dtype"]]
            shape = tuple(e["shape"])
            start, nbytes = int(e["offset"]), int(e["nbytes"])
        except KeyError as exc:
            raise DatasetFormatError(f"{manifest_path}: bad entry {e!r}") from exc
        if start + nbytes > len(blob) or nbytes != int(np.prod(shape)) * dtype.itemsize:
            raise DatasetFormatError(f"{weights_path}: {e['name']} exceeds file or size mismatch")
        arrays[e["name"]] = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape)),
                                          offset=start).reshape(shape).astype(dtype.newbyteorder("="))
    expected_names = list(param_shapes(spec, {n.split(".")[0] for n in arrays} - {"encoder"}))
    if list(arrays) != expected_names:
        raise DatasetFormatError(f"{manifest_path}: parameter names do not match backbone layout")
    return ParameterStore(arrays, spec, manifest.get("meta", {}))
