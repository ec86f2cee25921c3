"""Stage configuration and its JSON form."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from mtlab.datakit.augment import AUGMENT_OPS
from mtlab.errors import ConfigurationError
from mtlab.losses import TaskWeights
from mtlab.nets.store import BackboneSpec

STAGES = ("CR", "SR", "DR", "C_only")
STAGE_WEIGHTS = {
    "CR": TaskWeights(1, 0, 1, 0),
    "SR": TaskWeights(0, 1, 1, 0),
    "DR": TaskWeights(0, 0, 1, 1),
    "C_only": TaskWeights(1, 0, 0, 0),
}
STAGE_HEADS = {
    "CR": ("cls", "recon"),
    "SR": ("seg", "recon"),
    "DR": ("recon", "det"),
    "C_only": ("cls",),
}
STAGE_METRIC = {"CR": "accuracy", "C_only": "accuracy", "SR": "dice", "DR": "mean_ap"}
# Prefixes copied when a stage is preloaded from the stage before it.
DEFAULT_TRANSFER = {("CR", "SR"): ("encoder", "recon"), ("SR", "DR"): ("encoder",)}

AUTO = "auto"
# "cosine" decays the rate per step from learning_rate to zero over the stage.
LR_SCHEDULES = ("constant", "cosine")


@dataclass(frozen=True)
class Preload:
    """Where to take initial weights from and which name prefixes to copy.

    ``checkpoint`` is a checkpoint directory or ``stage:<NAME>`` for the
    best checkpoint of an earlier stage in the same pipeline.
    """

    checkpoint: str
    prefixes: tuple[str, ...] = ("encoder",)


@dataclass(frozen=True)
class StageConfig:
    stage: str
    epochs: int = 10
    batch_size: int | None = None
    learning_rate: float = 1e-4
    lr_schedule: str = "constant"
    seed: int = 0
    weights: TaskWeights | None = None
    augmentations: tuple[str, ...] | None = None
    preload: Preload | str | None = AUTO
    backbone: BackboneSpec = field(default_factory=BackboneSpec)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigurationError(f"stage must be one of {STAGES}, got {self.stage!r}")
        expected = STAGE_WEIGHTS[self.stage]
        if self.weights is None:
            object.__setattr__(self, "weights", expected)
        elif self.weights != expected:
            raise ConfigurationError(f"weights {self.weights.as_tuple()} inconsistent with stage "
                                     f"{self.stage} (expected {expected.as_tuple()})")
        if self.batch_size is None:
            object.__setattr__(self, "batch_size", 2 if self.stage == "DR" else 8)
        if self.augmentations is None:
            default = ("elastic", "rotate_small", "crop") if self.stage == "DR" else ()
            object.__setattr__(self, "augmentations", default)
        object.__setattr__(self, "augmentations", tuple(self.augmentations))
        bad = [a for a in self.augmentations if a not in AUGMENT_OPS]
        if bad:
            raise ConfigurationError(f"augmentations: unknown op(s) {bad}")
        if int(self.epochs) != self.epochs or self.epochs < 0:
            raise ConfigurationError(f"epochs must be a nonnegative integer, got {self.epochs!r}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")
        if not self.learning_rate >= 0:
            raise ConfigurationError("learning_rate must be nonnegative")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigurationError(f"lr_schedule must be one of {LR_SCHEDULES}, "
                                     f"got {self.lr_schedule!r}")
        if isinstance(self.preload, str) and self.preload != AUTO:
            raise ConfigurationError(f"preload must be an object, null or '{AUTO}'")

    @property
    def heads(self) -> tuple[str, ...]:
        return STAGE_HEADS[self.stage]

    @property
    def metric_name(self) -> str:
        return STAGE_METRIC[self.stage]

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["weights"] = list(self.weights.as_tuple())
        d["augmentations"] = list(self.augmentations)
        d["backbone"] = self.backbone.to_dict()
        if isinstance(self.preload, Preload):
            d["preload"] = {"checkpoint": self.preload.checkpoint,
                            "prefixes": list(self.preload.prefixes)}
        return d

    @classmethod
    def from_dict(cls, d) -> "StageConfig":
        if not isinstance(d, dict):
            raise ConfigurationError("stage config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown config key(s): {', '.join(unknown)}")
        if "stage" not in d:
            raise ConfigurationError("missing required field: stage")
        kw = dict(d)
        try:
            if kw.get("weights") is not None:
                kw["weights"] = TaskWeights(*kw["weights"])
            if kw.get("augmentations") is not None:
                kw["augmentations"] = tuple(kw["augmentations"])
            pre = kw.get("preload", AUTO)
            if isinstance(pre, dict):
                extra = set(pre) - {"checkpoint", "prefixes"}
                if extra:
                    raise ConfigurationError(f"unknown config key(s) in preload: {sorted(extra)}")
                kw["preload"] = Preload(str(pre["checkpoint"]),
                                        tuple(pre.get("prefixes", ("encoder",))))
            if "backbone" in kw:
                b = kw["backbone"]
                extra = set(b) - {"kind", "width", "input_size", "blocks"}
                if extra:
                    raise ConfigurationError(f"unknown config key(s) in backbone: {sorted(extra)}")
                kw["backbone"] = BackboneSpec(**{k: tuple(v) if k == "blocks" else v
                                                 for k, v in b.items()})
            return cls(**kw)
        except ConfigurationError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigurationError(f"invalid stage config: {exc}") from exc


def load_stage_configs(path) -> list[StageConfig]:
    """Read one config object or a list of them from a JSON file."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    items = raw if isinstance(raw, list) else [raw]
    return [StageConfig.from_dict(item) for item in items]
