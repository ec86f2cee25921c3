"""Command-line entry point: ``mtlab generate|train|evaluate|plot``.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric abort,
4 artifact mismatch (checkpoint, dataset or split unusable).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from mtlab.errors import (ArgumentError, ConfigurationError, DatasetFormatError,
                          DatasetIOError, NumericalError, StateError, TransferError)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_ARTIFACT = 0, 2, 3, 4
THREADS_ENV = "MTLAB_NUM_THREADS"
STAGE_PROFILE = {"CR": "CR", "C_only": "CR", "SR": "SR", "DR": "DR"}

log = logging.getLogger("mtlab")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


class _UsageError(Exception):
    pass


def _set_threads() -> None:
    import torch

    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    torch.set_num_threads(max(1, n))


def _split_dataset(samples, stage: str, seed: int):
    from mtlab.datakit import TABLE1_COUNTS, SplitSpec, TaskProfile, split

    profile = TaskProfile(STAGE_PROFILE[stage])
    return split(samples, SplitSpec.from_counts(*TABLE1_COUNTS[profile], seed=seed))


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# -- generate -----------------------------------------------------------------

def cmd_generate(args) -> int:
    from mtlab.datakit import generate_phantoms, save_dataset

    if args.count < 1:
        raise ArgumentError("--count must be positive")
    samples = generate_phantoms(args.count, args.profile, args.seed, size=args.size,
                                instances_per_sample=tuple(args.instances))
    out = save_dataset(samples, args.out)
    manifest = out / "manifest.json"
    print(f"wrote {len(samples)} {args.profile.upper()} phantoms ({args.size}px, seed {args.seed}) "
          f"to {out}")
    print(f"manifest sha256 {_file_digest(manifest)}")
    return EXIT_OK


# -- train --------------------------------------------------------------------

def _progress(stage, epoch, curve):
    rows = [r for r in curve.records if r.epoch == epoch]
    parts = [f"{r.split} {r.losses.l_total:.4f}" for r in rows]
    metric = rows[0].metric_value if rows else None
    log.info("%s epoch %d: %s; %s %s", stage, epoch, ", ".join(parts),
             rows[0].metric_name if rows else "", "NA" if metric is None else f"{metric:.4f}")


def cmd_train(args) -> int:
    from mtlab.datakit import load_dataset
    from mtlab.trainer import load_stage_configs, run_pipeline, run_preset

    if args.preset:
        if args.config or args.data:
            raise ArgumentError("--preset cannot be combined with --config or --data")
        result = run_preset(args.preset, args.out, scale=args.scale, seeds=args.seeds or (),
                            progress=_progress)
        print(result.table)
        print(f"outputs in {result.out_dir}")
        return EXIT_OK
    if not args.config or not args.data:
        raise ArgumentError("train needs either --preset or both --config and --data")
    configs = load_stage_configs(args.config)
    if len(args.data) not in (1, len(configs)):
        raise ArgumentError(f"give one --data directory or one per stage ({len(configs)})")
    dirs = args.data * len(configs) if len(args.data) == 1 else args.data
    cache, data = {}, []
    for cfg, d in zip(configs, dirs):
        if d not in cache:
            cache[d] = load_dataset(d)
        data.append(_split_dataset(cache[d], cfg.stage, args.split_seed))
    report = run_pipeline(configs, data, args.out, progress=_progress)
    for s in report.stages:
        final = s.to_dict()["final"]
        desc = ", ".join(f"{k} l_total {v['l_total']:.4f}" for k, v in final.items())
        print(f"{s.name}: {len(s.result.curve.epochs)} epochs, best epoch "
              f"{s.result.best_epoch}; {desc}")
    print(f"outputs in {report.out_dir}")
    return EXIT_OK


# -- evaluate -----------------------------------------------------------------

def cmd_evaluate(args) -> int:
    from mtlab import metrics as M
    from mtlab.datakit import load_dataset
    from mtlab.nets import detect, encode
    from mtlab.trainer import load_checkpoint, load_stage_configs, predict

    expected = None
    if args.config:
        expected = load_stage_configs(args.config)[0].backbone
    params, _ = load_checkpoint(args.checkpoint, expected)
    stage = params.meta.get("stage")
    if stage not in STAGE_PROFILE:
        stage = "DR" if "det" in params.heads else "SR" if "seg" in params.heads else "CR"
    samples = load_dataset(args.data)
    if args.split == "test":
        samples = _split_dataset(samples, stage, args.split_seed)[2]
    if not samples:
        raise StateError(f"no samples in the {args.split} split of {args.data}")
    if samples[0].image.shape[0] != params.spec.input_size:
        raise TransferError(f"checkpoint expects {params.spec.input_size}px slices, data has "
                            f"{samples[0].image.shape[0]}px")
    if "cls" in params.heads:
        if not all(s.has_class for s in samples):
            raise StateError("dataset has no class labels")
        report = M.classification_report(predict(params, samples, "cls"),
                                          [s.class_label.index for s in samples])
        table = M.format_table({stage: report.table_row()}, M.TABLE2_COLUMNS)
    elif "seg" in params.heads:
        if not all(s.has_seg for s in samples):
            raise StateError("dataset has no segmentation masks")
        report = M.segmentation_report(predict(params, samples, "seg"),
                                       np.stack([s.seg_mask for s in samples]))
        table = M.format_table({stage: report.table_row()}, M.TABLE3_COLUMNS)
    elif "det" in params.heads:
        if not all(s.has_instances for s in samples):
            raise StateError("dataset has no instance annotations")
        dets = [detect(params, encode(params, s.image), args.score_threshold, 20)
                for s in samples]
        report = M.detection_report(dets, [s.instances for s in samples])
        table = M.format_table({stage: {"mean AP": report.mean_ap,
                                        **{f"AP {n}": ap for n, ap in
                                           zip(("GGO", "consolidation", "effusion"),
                                               report.per_class_ap)}}},
                               ("mean AP", "AP GGO", "AP consolidation", "AP effusion"))
    else:
        raise StateError("checkpoint has no evaluable head")
    print(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        payload = {"checkpoint": str(args.checkpoint), "stage": stage, "split": args.split,
                   "n_samples": len(samples), "report": report.to_dict()}
        (out / "evaluation.json").write_text(json.dumps(payload, indent=1, sort_keys=True),
                                             encoding="utf-8")
        (out / "table.txt").write_text(table + "\n", encoding="utf-8")
    return EXIT_OK


# -- plot ---------------------------------------------------------------------

def _run_labels(paths: list[Path], labels) -> list[str]:
    if labels:
        if len(labels) != len(paths):
            raise ArgumentError(f"--labels needs {len(paths)} entries, got {len(labels)}")
        return list(labels)
    names = []
    for p in paths:
        parts = [x for x in p.resolve().parent.parts[-2:] if x not in ("best", "final")]
        names.append("/".join(parts) or p.stem)
    return names


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from mtlab.trainer import CSV_COLUMNS, TrainingCurve

    paths = [Path(p) for p in args.curves]
    curves = [TrainingCurve.load(p) for p in paths]
    labels = _run_labels(paths, args.labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    plt.rcParams["svg.hashsalt"] = "mtlab"
    styles = {"train": "-", "valid": "--"}

    def panel(filename, column, ylabel):
        fig, ax = plt.subplots(figsize=(6, 4))
        for k, (label, curve) in enumerate(zip(labels, curves)):
            for split, style in styles.items():
                ys = curve.series(split, column)
                if not ys or all(v is None for v in ys):
                    continue
                xs = [r.epoch for r in curve.rows(split)]
                ys = [np.nan if v is None else v for v in ys]
                ax.plot(xs, ys, style, color=f"C{k}", label=f"{label} {split}")
        ax.set_xlabel("epoch")
        ax.set_ylabel(ylabel)
        if ax.lines:
            ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out / filename, format="svg", metadata={"Date": None})
        plt.close(fig)

    metric_names = sorted({r.metric_name for c in curves for r in c.records})
    panel("loss.svg", "l_total", "total loss")
    panel("metric.svg", "metric", " / ".join(metric_names) or "metric")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("run",) + CSV_COLUMNS)
    for label, curve in zip(labels, curves):
        for row in csv.reader(io.StringIO(curve.to_csv())):
            if row[0] != "epoch":
                w.writerow([label] + row)
    (out / "merged.csv").write_text(buf.getvalue(), encoding="utf-8")
    print(f"wrote loss.svg, metric.svg and merged.csv ({len(curves)} run(s)) to {out}")
    return EXIT_OK


# -- wiring -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from mtlab.trainer.presets import PRESETS, SCALES

    parser = _Parser(prog="mtlab", description="Multi-task training lab on synthetic slices.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic phantom dataset")
    g.add_argument("--profile", required=True, type=str.upper, choices=("CR", "SR", "DR"))
    g.add_argument("--count", required=True, type=int)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=256)
    g.add_argument("--instances", type=int, nargs=2, default=(1, 3), metavar=("MIN", "MAX"),
                   help="lesions per DR phantom")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="run stages from a config file or a preset experiment")
    t.add_argument("--config")
    t.add_argument("--data", nargs="+", help="dataset directory, or one per stage")
    t.add_argument("--split-seed", type=int, default=0)
    t.add_argument("--preset", choices=PRESETS)
    t.add_argument("--scale", choices=tuple(SCALES), default="desk")
    t.add_argument("--seeds", type=int, nargs="+")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("test", "all"), default="test")
    e.add_argument("--split-seed", type=int, default=0)
    e.add_argument("--config", help="stage config whose backbone the checkpoint must match")
    e.add_argument("--score-threshold", type=float, default=0.5)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="loss and metric charts from curve CSVs")
    p.add_argument("curves", nargs="+")
    p.add_argument("--labels", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        _set_threads()
        return args.func(args)
    except NumericalError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TransferError, StateError, DatasetIOError) as exc:
        print(f"artifact mismatch: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except DatasetFormatError as exc:
        code = EXIT_USAGE if args.command == "plot" else EXIT_ARTIFACT
        print(f"{'invalid input' if code == EXIT_USAGE else 'artifact mismatch'}: {exc}",
              file=sys.stderr)
        return code
    except (ConfigurationError, ArgumentError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
