"""Ordered multi-stage training with weight preloading between stages."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import torch

from mtlab.errors import ConfigurationError, DatasetFormatError, DatasetIOError, TransferError
from mtlab.nets.model import to_torch
from mtlab.nets.store import ParameterStore, init_params, transfer_weights
from mtlab.trainer.checkpoint import load_checkpoint, save_checkpoint
from mtlab.trainer.config import AUTO, DEFAULT_TRANSFER, Preload, StageConfig
from mtlab.trainer.loop import StageResult, evaluate, run_stage

STAGE_REF = "stage:"
REPORT_FILE = "report.json"


@dataclass
class StageSummary:
    name: str
    stage: str
    directory: Path
    result: StageResult
    preload_source: str | None = None
    transferred: list = field(default_factory=list)
    test_losses: dict | None = None
    test_metric: float | None = None

    def to_dict(self) -> dict:
        curve = self.result.curve
        last = {r.split: r for r in curve.records if r.epoch == len(curve.epochs)}
        final = {split: {"l_total": r.losses.l_total, "metric": r.metric_value}
                 for split, r in sorted(last.items())}
        return {"name": self.name, "stage": self.stage, "directory": self.directory.name,
                "epochs": len(curve.epochs), "best_epoch": self.result.best_epoch,
                "preload_source": self.preload_source, "transferred": len(self.transferred),
                "final": final, "test_losses": self.test_losses,
                "test_metric": self.test_metric}


@dataclass
class PipelineReport:
    out_dir: Path
    stages: list[StageSummary]

    def __getitem__(self, name: str) -> StageSummary:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"stages": [s.to_dict() for s in self.stages]}


def _stage_names(configs) -> list[str]:
    seen: dict[str, int] = {}
    names = []
    for cfg in configs:
        seen[cfg.stage] = seen.get(cfg.stage, 0) + 1
        names.append(cfg.stage if seen[cfg.stage] == 1 else f"{cfg.stage}_{seen[cfg.stage]}")
    return names


def _data_for(data_per_stage, index: int, name: str, stage: str):
    if isinstance(data_per_stage, dict):
        for key in (name, stage):
            if key in data_per_stage:
                return data_per_stage[key]
        raise ConfigurationError(f"no data supplied for stage {name}")
    if index >= len(data_per_stage):
        raise ConfigurationError(f"no data supplied for stage {name}")
    return data_per_stage[index]


def _resolve_preload(cfg: StageConfig, previous: list[StageSummary], earlier_best: dict):
    """``(source ParameterStore, prefixes, label)`` or ``None`` when nothing is preloaded."""
    pre = cfg.preload
    if pre is None:
        return None
    if pre == AUTO:
        if not previous:
            return None
        prev = previous[-1]
        prefixes = DEFAULT_TRANSFER.get((prev.stage, cfg.stage))
        if prefixes is None:
            return None
        return earlier_best[prev.name], prefixes, f"{STAGE_REF}{prev.name}"
    assert isinstance(pre, Preload)
    if pre.checkpoint.startswith(STAGE_REF):
        ref = pre.checkpoint[len(STAGE_REF):]
        if ref not in earlier_best:
            raise ConfigurationError(f"preload {pre.checkpoint!r} does not name an earlier stage "
                                     f"(available: {sorted(earlier_best) or 'none'})")
        return earlier_best[ref], pre.prefixes, pre.checkpoint
    try:
        source, _ = load_checkpoint(pre.checkpoint)
    except (DatasetFormatError, DatasetIOError) as exc:
        raise ConfigurationError(f"cannot resolve preload {pre.checkpoint!r}: {exc}") from exc
    return source, pre.prefixes, str(pre.checkpoint)


def prepare_params(cfg: StageConfig, source: ParameterStore | None = None, prefixes=()):
    """Fresh parameters for ``cfg``, optionally overwritten from ``source``."""
    params = init_params(cfg.backbone, cfg.heads, cfg.seed)
    if source is None:
        return params, []
    if source.spec != cfg.backbone:
        raise TransferError(f"cannot preload {source.spec.kind} (width {source.spec.width}, "
                            f"{source.spec.input_size}px) into {cfg.backbone.kind} "
                            f"(width {cfg.backbone.width}, {cfg.backbone.input_size}px)")
    params, report = transfer_weights(source, params, prefixes)
    return params, report["copied"]


def run_pipeline(stage_configs, data_per_stage, out_dir, progress=None) -> PipelineReport:
    """Run the stages in order and write their artifacts under ``out_dir``.

    ``data_per_stage`` is a list parallel to ``stage_configs`` or a dict
    keyed by stage name; each entry is ``(train, valid, test)``.  Each stage
    gets ``<out_dir>/<name>/`` holding ``best/`` and ``final/`` checkpoints,
    ``curve.csv`` and ``report.json``.  A summary ``report.json`` is written
    at the top level.
    """
    configs = list(stage_configs)
    if not configs:
        raise ConfigurationError("pipeline needs at least one stage")
    names = _stage_names(configs)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    # Resolve stage references up front so a bad reference fails before any training.
    for i, cfg in enumerate(configs):
        pre = cfg.preload
        if isinstance(pre, Preload) and pre.checkpoint.startswith(STAGE_REF):
            if pre.checkpoint[len(STAGE_REF):] not in names[:i]:
                raise ConfigurationError(f"stage {names[i]}: preload {pre.checkpoint!r} does not "
                                         f"name an earlier stage")
    summaries: list[StageSummary] = []
    earlier_best: dict[str, ParameterStore] = {}
    for i, (cfg, name) in enumerate(zip(configs, names)):
        data = _data_for(data_per_stage, i, name, cfg.stage)
        resolved = _resolve_preload(cfg, summaries, earlier_best)
        source, prefixes, label = resolved if resolved else (None, (), None)
        params, copied = prepare_params(cfg, source, prefixes)
        cb = None if progress is None else (lambda e, c, _n=name: progress(_n, e, c))
        result = run_stage(cfg, data, params, progress=cb)
        stage_dir = out_dir / name
        save_checkpoint(result.best_params, result.curve, stage_dir / "best")
        save_checkpoint(result.params, result.curve, stage_dir / "final")
        result.curve.save(stage_dir / "curve.csv")
        summary = StageSummary(name, cfg.stage, stage_dir, result, label, copied)
        test = list(data[2]) if len(data) > 2 else []
        if test:
            best = result.best_params
            dtype = torch.float64 if best.dtype == "float64" else torch.float32
            bundle, metric = evaluate(to_torch(best), test, cfg, best.spec, dtype)
            summary.test_losses = {k: v for k, v in vars(bundle.as_floats()).items()}
            summary.test_metric = metric
        (stage_dir / REPORT_FILE).write_text(
            json.dumps({"config": cfg.to_dict(), **summary.to_dict()}, indent=1, sort_keys=True),
            encoding="utf-8")
        summaries.append(summary)
        earlier_best[name] = result.best_params
    report = PipelineReport(out_dir, summaries)
    (out_dir / REPORT_FILE).write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True),
                                       encoding="utf-8")
    return report
