import json

import numpy as np
import pytest

from mtlab.cli import main
from mtlab.nets import BackboneSpec, init_params, save_params
from mtlab.trainer import StageConfig

SPEC = BackboneSpec("vgg13_style", width=1 / 8, input_size=32)


@pytest.fixture(scope="module")
def datasets(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    for profile, count in (("CR", 30), ("SR", 20)):
        assert main(["generate", "--profile", profile.lower(), "--count", str(count), "--seed",
                     "1", "--size", "32", "--out", str(root / profile)]) == 0
    return root


def write_config(path, stage, **kw):
    cfg = StageConfig(stage, backbone=SPEC, epochs=kw.pop("epochs", 1), learning_rate=1e-3, **kw)
    path.write_text(json.dumps(cfg.to_dict()))
    return path


@pytest.fixture(scope="module")
def cr_run(tmp_path_factory, datasets):
    root = tmp_path_factory.mktemp("cr")
    config = write_config(root / "cr.json", "CR", epochs=2)
    code = main(["train", "--config", str(config), "--data", str(datasets / "CR"),
                 "--out", str(root / "run")])
    assert code == 0
    return root


def test_generate_is_deterministic(tmp_path, capsys):
    args = ["generate", "--profile", "dr", "--count", "3", "--seed", "4", "--size", "32"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    first = capsys.readouterr().out
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    second = capsys.readouterr().out
    digest = [line for line in first.splitlines() if "sha256" in line]
    assert digest and digest == [line for line in second.splitlines() if "sha256" in line]
    assert len(list((tmp_path / "a").glob("**/*.png"))) >= 3


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main(["generate", "--profile", "CR", "--count", "3"]) == 2
    assert "--out" in capsys.readouterr().err
    assert main(["generate", "--profile", "XR", "--count", "3", "--out", str(tmp_path)]) == 2
    assert main(["generate", "--profile", "CR", "--count", "0", "--out", str(tmp_path)]) == 2
    assert main([]) == 2
    assert main(["train", "--out", str(tmp_path)]) == 2


def test_train_writes_checkpoint_and_curve(cr_run):
    run = cr_run / "run" / "CR"
    assert (run / "best" / "weights.bin").is_file()
    assert (run / "final" / "manifest.json").is_file()
    lines = (run / "curve.csv").read_text().splitlines()
    assert lines[0].startswith("epoch,split,l_total")
    assert len(lines) == 1 + 2 * 2


def test_config_schema_violation_exit_2(tmp_path, datasets, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"stage": "CR", "epochs": 1, "warmup": 3}))
    assert main(["train", "--config", str(bad), "--data", str(datasets / "CR"),
                 "--out", str(tmp_path / "o")]) == 2
    assert "warmup" in capsys.readouterr().err
    bad.write_text("{ truncated")
    assert main(["train", "--config", str(bad), "--data", str(datasets / "CR"),
                 "--out", str(tmp_path / "o")]) == 2


def test_nan_abort_exit_3(tmp_path, datasets, capsys):
    params = init_params(SPEC, {"cls", "recon"}, 0)
    w = params["encoder.block1.conv1.weight"].copy()
    w[:] = np.nan
    save_params(params.replace({"encoder.block1.conv1.weight": w}), tmp_path / "poison")
    config = write_config(tmp_path / "c.json", "CR")
    raw = json.loads(config.read_text())
    raw["preload"] = {"checkpoint": str(tmp_path / "poison"), "prefixes": ["encoder"]}
    config.write_text(json.dumps(raw))
    code = main(["train", "--config", str(config), "--data", str(datasets / "CR"),
                 "--out", str(tmp_path / "o")])
    assert code == 3
    assert "epoch 1" in capsys.readouterr().err


def test_evaluate_cr_prints_classification_columns(cr_run, datasets, tmp_path, capsys):
    code = main(["evaluate", "--checkpoint", str(cr_run / "run" / "CR" / "best"),
                 "--data", str(datasets / "CR"), "--out", str(tmp_path)])
    assert code == 0
    header = capsys.readouterr().out.splitlines()[0]
    cols = [c.strip() for c in header.split("|")[1:]]
    assert cols == ["Accuracy", "Macro F1", "F1 non-covid", "F1 covid-19", "F1 cancer"]
    payload = json.loads((tmp_path / "evaluation.json").read_text())
    assert payload["stage"] == "CR" and payload["n_samples"] > 0


def test_evaluate_sr_prints_segmentation_columns(tmp_path, datasets, capsys):
    config = write_config(tmp_path / "sr.json", "SR")
    assert main(["train", "--config", str(config), "--data", str(datasets / "SR"),
                 "--out", str(tmp_path / "run")]) == 0
    capsys.readouterr()
    assert main(["evaluate", "--checkpoint", str(tmp_path / "run" / "SR" / "final"),
                 "--data", str(datasets / "SR"), "--split", "all"]) == 0
    header = capsys.readouterr().out.splitlines()[0]
    assert [c.strip() for c in header.split("|")[1:]] == [
        "Accuracy", "F1", "Sensitivity", "Specificity", "Precision", "ROC AUC", "IoU"]


def test_evaluate_mismatches_exit_4(cr_run, datasets, tmp_path):
    ck = str(cr_run / "run" / "CR" / "best")
    other = tmp_path / "res.json"
    other.write_text(json.dumps({"stage": "CR", "backbone": {
        "kind": "resnet50_style", "width": 0.125, "input_size": 32, "blocks": [1, 1, 1, 1]}}))
    assert main(["evaluate", "--checkpoint", ck, "--data", str(datasets / "CR"),
                 "--config", str(other)]) == 4
    main(["generate", "--profile", "CR", "--count", "2", "--size", "32",
          "--out", str(tmp_path / "tiny")])
    # two samples leave the test split empty
    assert main(["evaluate", "--checkpoint", ck, "--data", str(tmp_path / "tiny")]) == 4
    main(["generate", "--profile", "CR", "--count", "4", "--size", "64",
          "--out", str(tmp_path / "big")])
    assert main(["evaluate", "--checkpoint", ck, "--data", str(tmp_path / "big"),
                 "--split", "all"]) == 4
    assert main(["evaluate", "--checkpoint", str(tmp_path / "missing"),
                 "--data", str(datasets / "CR")]) == 4


def test_plot_overlays_runs(cr_run, tmp_path, capsys):
    curve = cr_run / "run" / "CR" / "curve.csv"
    out = tmp_path / "plots"
    assert main(["plot", str(curve), str(curve), "--labels", "a", "b", "--out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["loss.svg", "merged.csv", "metric.svg"]
    merged = (out / "merged.csv").read_text().splitlines()
    assert merged[0].startswith("run,epoch") and len(merged) == 1 + 2 * 4
    first = (out / "loss.svg").read_bytes()
    assert main(["plot", str(curve), str(curve), "--labels", "a", "b", "--out", str(out)]) == 0
    assert (out / "loss.svg").read_bytes() == first
    assert main(["plot", str(curve), "--out", str(tmp_path / "single")]) == 0


def test_plot_rejects_gaps_exit_2(cr_run, tmp_path, capsys):
    lines = (cr_run / "run" / "CR" / "curve.csv").read_text().splitlines()
    broken = tmp_path / "gap.csv"
    broken.write_text("\n".join(lines[:1] + [lines[1].replace("1,train", "2,train", 1)]) + "\n")
    assert main(["plot", str(broken), "--out", str(tmp_path / "p")]) == 2
    assert "contiguous" in capsys.readouterr().err
    malformed = tmp_path / "bad.csv"
    malformed.write_text(lines[0] + "\n1,train,oops\n")
    assert main(["plot", str(malformed), "--out", str(tmp_path / "p")]) == 2
    assert "line 2" in capsys.readouterr().err


def test_preset_at_ci_scale(tmp_path, capsys):
    code = main(["train", "--preset", "fig3_detection_overfit", "--scale", "ci",
                 "--out", str(tmp_path)])
    assert code == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["preset"] == "fig3_detection_overfit" and summary["scale"] == "ci"
    assert (tmp_path / "table.txt").is_file()
