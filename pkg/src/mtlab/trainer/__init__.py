"""Staged training: configs, the epoch loop, checkpoints, pipelines and presets."""
from mtlab.trainer.checkpoint import load_checkpoint, save_checkpoint
from mtlab.trainer.config import (AUTO, DEFAULT_TRANSFER, STAGE_WEIGHTS, Preload, StageConfig,
                                  load_stage_configs)
from mtlab.trainer.curves import CSV_COLUMNS, EpochRecord, TrainingCurve
from mtlab.trainer.loop import StageResult, evaluate, predict, run_stage, step
from mtlab.trainer.optim import AdamState
from mtlab.trainer.pipeline import PipelineReport, StageSummary, prepare_params, run_pipeline
from mtlab.trainer.presets import (PRESETS, SCALES, ExperimentPreset, PresetResult,
                                   overfit_shape, run_preset)

__all__ = [
    "AUTO", "AdamState", "CSV_COLUMNS", "DEFAULT_TRANSFER", "EpochRecord", "ExperimentPreset",
    "PRESETS", "PipelineReport", "Preload", "PresetResult", "SCALES", "STAGE_WEIGHTS",
    "StageConfig", "StageResult", "StageSummary", "TrainingCurve", "evaluate",
    "load_checkpoint", "load_stage_configs", "overfit_shape", "predict", "prepare_params",
    "run_pipeline", "run_preset", "run_stage", "save_checkpoint", "step",
]
