"""Ready-made experiments: ablations, backbone comparison and the detection overfitting run.

Every preset generates its own phantom data from the seed, so a preset run
is fully determined by ``(name, scale, seeds)``.
"""
from __future__ import annotations

import json
import math
import statistics
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from mtlab import metrics as M
from mtlab.datakit import TABLE1_COUNTS, SplitSpec, TaskProfile, generate_phantoms, split
from mtlab.errors import ConfigurationError
from mtlab.nets.store import BackboneSpec
from mtlab.trainer.config import Preload, StageConfig
from mtlab.trainer.loop import predict
from mtlab.trainer.pipeline import run_pipeline

PRESETS = ("table2_ablation", "table3_preload_ablation", "fig4_backbone_compare",
           "fig3_detection_overfit")
BACKBONES = ("vgg13_style", "resnet50_style")
DICE_TARGET = 0.3
RISE_TARGET = 0.10
SMOOTHING = 5
# The ablation copies only the shared encoder: a converged CR reconstruction
# decoder leaves the SR stage on a Dice-loss plateau near 0.67.
TABLE3_PREFIXES = ("encoder",)


@dataclass(frozen=True)
class Scale:
    name: str
    input_size: int
    width: float

    def backbone(self, kind: str = "vgg13_style") -> BackboneSpec:
        return BackboneSpec(kind, self.width, self.input_size)


SCALES = {
    "ci": Scale("ci", 32, 1 / 8),
    "desk": Scale("desk", 64, 1 / 4),
    "full": Scale("full", 256, 1.0),
}

# Per-preset, per-scale knobs.  ``n_*`` are phantom counts before splitting.
SETTINGS = {
    "table2_ablation": {
        "ci": dict(n_cr=24, epochs=2, lr=1e-3, batch=8),
        "desk": dict(n_cr=120, epochs=15, lr=1e-3, batch=8),
        "full": dict(n_cr=1816, epochs=50, lr=1e-4, batch=8),
    },
    "table3_preload_ablation": {
        "ci": dict(n_cr=16, n_sr=12, cr_epochs=2, sr_epochs=3, lr=1e-3, batch=2),
        "desk": dict(n_cr=40, n_sr=16, cr_epochs=30, sr_epochs=80, lr=1e-4, batch=2),
        "full": dict(n_cr=1816, n_sr=472, cr_epochs=50, sr_epochs=700, lr=1e-4, batch=8),
    },
    "fig4_backbone_compare": {
        "ci": dict(n_cr=16, n_sr=12, epochs=2, lr=1e-3, batch=4),
        "desk": dict(n_cr=40, n_sr=20, epochs=20, lr=3e-4, batch=4),
        "full": dict(n_cr=1816, n_sr=472, epochs=100, lr=1e-4, batch=8),
    },
    "fig3_detection_overfit": {
        "ci": dict(n_dr=12, epochs=3, lr=1e-3, batch=2, augment=False),
        "desk": dict(n_dr=99, epochs=100, lr=5e-4, batch=8, augment=False, schedule="cosine"),
        "full": dict(n_dr=99, epochs=100, lr=1e-4, batch=2, augment=True),
    },
}

DEFAULT_SEEDS = {
    "table2_ablation": (0, 1, 2, 3, 4),
    "table3_preload_ablation": (0, 1, 2, 3, 4),
    "fig4_backbone_compare": (0,),
    "fig3_detection_overfit": (0,),
}


@dataclass(frozen=True)
class ExperimentPreset:
    name: str
    seeds: tuple[int, ...] = ()
    scale: str = "desk"

    def __post_init__(self):
        if self.name not in PRESETS:
            raise ConfigurationError(f"unknown preset {self.name!r}; choose from {PRESETS}")
        if self.scale not in SCALES:
            raise ConfigurationError(f"unknown scale {self.scale!r}; choose from {tuple(SCALES)}")
        seeds = tuple(int(s) for s in self.seeds) or DEFAULT_SEEDS[self.name]
        object.__setattr__(self, "seeds", seeds)

    @property
    def settings(self) -> dict:
        return SETTINGS[self.name][self.scale]


@dataclass
class PresetResult:
    preset: ExperimentPreset
    out_dir: Path
    summary: dict
    table: str = ""
    curves: list = field(default_factory=list)


def data_seed(seed: int, tag: str) -> int:
    return zlib.crc32(f"{tag}:{seed}".encode())


def phantom_splits(profile: str, count: int, seed: int, size: int, **kw):
    """Generate ``count`` phantoms and split them with the reference fractions for ``profile``."""
    samples = generate_phantoms(count, profile, data_seed(seed, profile), size=size, **kw)
    spec = SplitSpec.from_counts(*TABLE1_COUNTS[TaskProfile(profile)], seed=seed)
    return split(samples, spec)


def epochs_to_reach(curve, column: str, target: float, split_name: str = "train"):
    """First epoch whose ``column`` value is at or below ``target`` (``None`` if never)."""
    for epoch, value in enumerate(curve.series(split_name, column), start=1):
        if value is not None and value <= target:
            return epoch
    return None


def moving_average(values, window: int = SMOOTHING) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < window:
        return values.copy()
    return np.convolve(values, np.ones(window) / window, mode="valid")


def overfit_shape(curve, window: int = SMOOTHING) -> dict:
    """Shape statistics of a detection curve: validation rise and smoothed training trend."""
    train = np.asarray(curve.series("train", "l_detect"), dtype=np.float64)
    valid = np.asarray(curve.series("valid", "l_detect"), dtype=np.float64)
    smooth = moving_average(train, window)
    steps = np.diff(smooth)
    rise = float(valid[-1] / valid.min() - 1.0) if len(valid) else float("nan")
    return {
        "valid_min": float(valid.min()) if len(valid) else None,
        "valid_min_epoch": int(valid.argmin()) + 1 if len(valid) else None,
        "valid_final": float(valid[-1]) if len(valid) else None,
        "valid_rise": rise,
        "train_first": float(train[0]), "train_final": float(train[-1]),
        "train_smoothed_monotone": bool(np.all(steps <= 0)),
        "train_smoothed_increases": int(np.sum(steps > 0)),
        "train_smoothed_max_increase": float(steps.max(initial=0.0)),
        "overfitting": bool(rise >= RISE_TARGET and np.all(steps <= 0)),
    }


def _mean_rows(rows: list[dict]) -> dict:
    out = {}
    for key in rows[0]:
        vals = [r[key] for r in rows if r[key] is not None]
        out[key] = float(np.mean(vals)) if vals else None
    return out


def _stage(scale: Scale, stage: str, epochs, lr, batch, seed, kind="vgg13_style", **kw):
    return StageConfig(stage, epochs=epochs, batch_size=batch, learning_rate=lr, seed=seed,
                       backbone=scale.backbone(kind), **kw)


def _table2(preset, scale, s, out_dir, progress):
    variants = (("Classification & reconstruction", "CR"), ("Only classification", "C_only"))
    rows = {label: [] for label, _ in variants}
    runs = []
    for seed in preset.seeds:
        data = phantom_splits("CR", s["n_cr"], seed, scale.input_size)
        for label, stage in variants:
            cfg = _stage(scale, stage, s["epochs"], s["lr"], s["batch"], seed, preload=None)
            rep = run_pipeline([cfg], [data], out_dir / f"seed{seed}" / stage, progress)
            best = rep.stages[0].result.best_params
            report = M.classification_report(predict(best, data[2], "cls"),
                                              [x.class_label.index for x in data[2]])
            rows[label].append(report.table_row())
            runs.append({"seed": seed, "variant": stage, **report.to_dict()})
    table_rows = {label: _mean_rows(r) for label, r in rows.items()}
    summary = {"runs": runs, "table": table_rows}
    return summary, M.format_table(table_rows, M.TABLE2_COLUMNS)


def _table3(preset, scale, s, out_dir, progress):
    rows = {"preloaded": [], "from scratch": []}
    runs = []
    for seed in preset.seeds:
        cr_data = phantom_splits("CR", s["n_cr"], seed, scale.input_size)
        sr_data = phantom_splits("SR", s["n_sr"], seed, scale.input_size)
        cr = _stage(scale, "CR", s["cr_epochs"], s["lr"], s["batch"], seed, preload=None)
        sr_pre = _stage(scale, "SR", s["sr_epochs"], s["lr"], s["batch"], seed,
                        preload=Preload("stage:CR", TABLE3_PREFIXES))
        sr_scratch = replace(sr_pre, preload=None)
        pre = run_pipeline([cr, sr_pre], [cr_data, sr_data], out_dir / f"seed{seed}" / "preloaded",
                           progress)
        scratch = run_pipeline([sr_scratch], [sr_data], out_dir / f"seed{seed}" / "scratch",
                               progress)
        for label, summary in (("preloaded", pre["SR"]), ("from scratch", scratch["SR"])):
            best = summary.result.best_params
            report = M.segmentation_report(predict(best, sr_data[2], "seg"),
                                           np.stack([x.seg_mask for x in sr_data[2]]))
            rows[label].append(report.table_row())
            runs.append({"seed": seed, "variant": label,
                         "epochs_to_target": epochs_to_reach(summary.result.curve, "l_segm",
                                                             DICE_TARGET),
                         **report.to_dict()})

    def median_epochs(label):
        vals = [r["epochs_to_target"] for r in runs if r["variant"] == label]
        vals = [math.inf if v is None else v for v in vals]
        return statistics.median(vals)

    med_pre, med_scratch = median_epochs("preloaded"), median_epochs("from scratch")
    table_rows = {f"Segmentation & reconstruction ({k})": _mean_rows(v) for k, v in rows.items()}
    summary = {"runs": runs, "table": table_rows, "dice_target": DICE_TARGET,
               "median_epochs_preloaded": None if math.isinf(med_pre) else med_pre,
               "median_epochs_scratch": None if math.isinf(med_scratch) else med_scratch,
               "preload_not_slower": bool(med_pre <= med_scratch and not math.isinf(med_pre))}
    text = M.format_table(table_rows, M.TABLE3_COLUMNS)
    text += (f"\n\nepochs to training Dice loss <= {DICE_TARGET} (median over "
             f"{len(preset.seeds)} seeds): preloaded {summary['median_epochs_preloaded']}, "
             f"from scratch {summary['median_epochs_scratch']}")
    return summary, text


def _fig4(preset, scale, s, out_dir, progress):
    runs = []
    for seed in preset.seeds:
        cr_data = phantom_splits("CR", s["n_cr"], seed, scale.input_size)
        sr_data = phantom_splits("SR", s["n_sr"], seed, scale.input_size)
        for kind in BACKBONES:
            configs = [_stage(scale, "CR", s["epochs"], s["lr"], s["batch"], seed, kind,
                              preload=None),
                       _stage(scale, "SR", s["epochs"], s["lr"], s["batch"], seed, kind)]
            rep = run_pipeline(configs, [cr_data, sr_data], out_dir / f"seed{seed}" / kind,
                               progress)
            for st in rep.stages:
                curve = st.result.curve
                totals = [r.losses.l_total for r in curve.records]
                runs.append({"seed": seed, "backbone": kind, "stage": st.stage,
                             "epochs": len(curve.epochs),
                             "all_finite": bool(np.all(np.isfinite(totals))),
                             "final_train_metric": curve.series("train", "metric")[-1],
                             "final_valid_metric": (curve.series("valid", "metric") or [None])[-1],
                             "curve": str((st.directory / "curve.csv").relative_to(out_dir))})
    lines = [f"{'backbone':<16}{'stage':<7}{'seed':>5}{'epochs':>8}{'finite':>8}"
             f"{'train metric':>14}{'valid metric':>14}"]
    fmt = lambda v: "NA" if v is None else f"{v:.3f}"  # noqa: E731
    for r in runs:
        lines.append(f"{r['backbone']:<16}{r['stage']:<7}{r['seed']:>5}{r['epochs']:>8}"
                     f"{str(r['all_finite']):>8}{fmt(r['final_train_metric']):>14}"
                     f"{fmt(r['final_valid_metric']):>14}")
    return {"runs": runs, "all_finite": all(r["all_finite"] for r in runs)}, "\n".join(lines)


def _fig3(preset, scale, s, out_dir, progress):
    runs = []
    for seed in preset.seeds:
        data = phantom_splits("DR", s["n_dr"], seed, scale.input_size)
        kw = {} if s["augment"] else {"augmentations": ()}
        kw["lr_schedule"] = s.get("schedule", "constant")
        cfg = _stage(scale, "DR", s["epochs"], s["lr"], s["batch"], seed, preload=None, **kw)
        rep = run_pipeline([cfg], [data], out_dir / f"seed{seed}", progress)
        shape = overfit_shape(rep.stages[0].result.curve)
        runs.append({"seed": seed, "n_train": len(data[0]), "n_valid": len(data[1]), **shape})
    lines = []
    for r in runs:
        lines.append(f"seed {r['seed']}: train {r['n_train']} / valid {r['n_valid']}; "
                     f"validation l_detect min {r['valid_min']:.4f} at epoch "
                     f"{r['valid_min_epoch']}, final {r['valid_final']:.4f} "
                     f"(+{100 * r['valid_rise']:.1f}%); training l_detect "
                     f"{r['train_first']:.4f} -> {r['train_final']:.4f}, "
                     f"{SMOOTHING}-epoch average monotone: {r['train_smoothed_monotone']}")
    return {"runs": runs}, "\n".join(lines)


_RUNNERS = {"table2_ablation": _table2, "table3_preload_ablation": _table3,
            "fig4_backbone_compare": _fig4, "fig3_detection_overfit": _fig3}


def run_preset(preset: ExperimentPreset | str, out_dir, scale: str | None = None, seeds=(),
               progress=None) -> PresetResult:
    """Run a preset and write ``summary.json`` and ``table.txt`` under ``out_dir``."""
    if isinstance(preset, str):
        preset = ExperimentPreset(preset, tuple(seeds), scale or "desk")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sc = SCALES[preset.scale]
    summary, table = _RUNNERS[preset.name](preset, sc, preset.settings, out_dir, progress)
    summary = {"preset": preset.name, "scale": preset.scale, "seeds": list(preset.seeds),
               "settings": preset.settings, **summary}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True),
                                          encoding="utf-8")
    (out_dir / "table.txt").write_text(table + "\n", encoding="utf-8")
    curves = sorted(p.relative_to(out_dir) for p in out_dir.rglob("curve.csv")
                    if p.parent.name not in ("best", "final"))
    return PresetResult(preset, out_dir, summary, table, [out_dir / c for c in curves])
