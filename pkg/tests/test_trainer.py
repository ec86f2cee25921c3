import json
import math

import numpy as np
import pytest

from mtlab.datakit import Sample
from mtlab.errors import (ArgumentError, ConfigurationError, DatasetFormatError, NumericalError,
                          StateError, TransferError)
from mtlab.losses import TaskWeights, total_loss
from mtlab.nets import BackboneSpec, init_params, load_params
from mtlab.trainer.loop import step_rate
from mtlab.trainer import (Preload, StageConfig, TrainingCurve, load_checkpoint,
                           load_stage_configs, run_pipeline, run_stage, save_checkpoint, step)

SPEC = BackboneSpec("vgg13_style", width=1 / 8, input_size=32)
RES = BackboneSpec("resnet50_style", width=1 / 8, input_size=32, blocks=(1, 1, 1, 1))


def cfg(stage, **kw):
    kw.setdefault("backbone", SPEC)
    kw.setdefault("epochs", 2)
    kw.setdefault("learning_rate", 1e-3)
    return StageConfig(stage, **kw)


# -- config -------------------------------------------------------------------

def test_stage_weights_and_defaults():
    assert cfg("CR").weights == TaskWeights(1, 0, 1, 0)
    assert cfg("DR").batch_size == 2 and cfg("SR").batch_size == 8
    assert cfg("DR").augmentations == ("elastic", "rotate_small", "crop")
    with pytest.raises(ConfigurationError):
        cfg("SR", weights=TaskWeights(1, 0, 1, 0))
    with pytest.raises(ConfigurationError):
        cfg("XR")


def test_config_json_round_trip_and_unknown_keys(tmp_path):
    c = cfg("SR", preload=Preload("stage:CR", ("encoder", "recon")), seed=4)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(c.to_dict()))
    assert load_stage_configs(path) == [c]
    path.write_text(json.dumps({**c.to_dict(), "momentum": 0.9}))
    with pytest.raises(ConfigurationError, match="momentum"):
        load_stage_configs(path)
    path.write_text("{not json")
    with pytest.raises(ConfigurationError):
        load_stage_configs(path)


def test_cosine_schedule_rates():
    c = cfg("DR", lr_schedule="cosine", learning_rate=4e-4)
    assert step_rate(c, 0, 10) == 4e-4
    assert abs(step_rate(c, 5, 10) - 2e-4) <= 1e-18
    rates = [step_rate(c, k, 10) for k in range(10)]
    assert all(b < a for a, b in zip(rates, rates[1:])) and rates[-1] > 0
    assert step_rate(cfg("DR"), 7, 10) == 1e-3
    with pytest.raises(ConfigurationError, match="lr_schedule"):
        cfg("DR", lr_schedule="linear")


# -- step ---------------------------------------------------------------------

def test_zero_rate_step_is_bitwise_identity(cr_small):
    params = init_params(SPEC, {"cls", "recon"}, 0)
    new, bundle, _ = step(params, cr_small[:2], TaskWeights(1, 0, 1, 0), 0.0)
    assert new.equals(params)
    assert bundle.l_total > 0


def test_step_leaves_input_untouched(cr_small):
    params = init_params(SPEC, {"cls", "recon"}, 0)
    snapshot = {k: v.copy() for k, v in params.items()}
    new, _, _ = step(params, cr_small[:2], TaskWeights(1, 0, 1, 0), 1e-3)
    assert all(np.array_equal(params[k], v) for k, v in snapshot.items())
    assert not new.equals(params)


def test_descent_on_constant_image():
    img = np.full((32, 32), 0.6, np.float32)
    batch = [Sample(img, "flat")]
    params = init_params(SPEC, {"recon"}, 2)
    state = None
    losses = []
    for _ in range(6):
        params, bundle, state = step(params, batch, TaskWeights(0, 0, 1, 0), 1e-4, state)
        losses.append(bundle.l_recon)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_step_errors(cr_small):
    params = init_params(SPEC, {"cls", "recon"}, 0)
    with pytest.raises(ArgumentError):
        step(params, [], TaskWeights(1, 0, 1, 0), 1e-3)
    with pytest.raises(StateError):
        step(params, cr_small[:1], TaskWeights(0, 1, 1, 0), 1e-3)


def test_non_finite_input_aborts(cr_small):
    s = cr_small[0]
    bad = Sample(np.full_like(s.image, np.nan), "nan", s.class_label)
    params = init_params(SPEC, {"cls", "recon"}, 0)
    with pytest.raises(NumericalError):
        step(params, [bad], TaskWeights(1, 0, 1, 0), 1e-3)


# -- run_stage ----------------------------------------------------------------

def test_zero_epochs_is_identity(cr_small):
    params = init_params(SPEC, {"cls", "recon"}, 0)
    res = run_stage(cfg("CR", epochs=0), (cr_small[:4], cr_small[4:6]), params)
    assert res.params.equals(params) and len(res.curve) == 0


def test_missing_annotations_fail_before_training(cr_small):
    params = init_params(SPEC, {"seg", "recon"}, 0)
    with pytest.raises(ConfigurationError, match="seg"):
        run_stage(cfg("SR"), (cr_small[:4], []), params)


def test_nan_abort_names_epoch_and_component(cr_small):
    params = init_params(SPEC, {"cls", "recon"}, 0)
    w = params["cls.fc3.weight"].copy()
    w[0, 0] = np.inf
    params = params.replace({"cls.fc3.weight": w})
    with pytest.raises(NumericalError, match=r"epoch 1") as info:
        run_stage(cfg("CR"), (cr_small[:4], []), params)
    assert "classif" in str(info.value) or "cls." in str(info.value)


def test_inactive_heads_unchanged_and_curve_integrity(cr_small):
    params = init_params(SPEC, {"cls", "seg", "recon", "det"}, 3)
    res = run_stage(cfg("CR", epochs=3), (cr_small[:6], cr_small[6:9]), params)
    for name in params:
        if name.startswith(("seg.", "det.")):
            assert np.array_equal(res.params[name], params[name]), name
    assert not np.array_equal(res.params["encoder.block1.conv1.weight"],
                              params["encoder.block1.conv1.weight"])
    assert res.curve.epochs == [1, 2, 3]
    for rec in res.curve.records:
        comps = {k: v for k, v in rec.losses.components().items() if v is not None}
        assert rec.losses.l_total == total_loss(comps, TaskWeights(1, 0, 1, 0)).l_total
        assert rec.losses.l_segm is None and rec.losses.l_detect is None
    again = TrainingCurve.from_csv(res.curve.to_csv())
    for a, b in zip(again.records, res.curve.records):
        assert a.losses.l_total == a.losses.l_classif + a.losses.l_recon == b.losses.l_total
    assert 1 <= res.best_epoch <= 3


def test_run_stage_is_deterministic(dr_small):
    params = init_params(SPEC, {"recon", "det"}, 1)
    c = cfg("DR", epochs=1)
    a = run_stage(c, (dr_small[:4], dr_small[4:]), params)
    b = run_stage(c, (dr_small[:4], dr_small[4:]), params)
    assert a.params.equals(b.params)
    assert a.curve.to_csv() == b.curve.to_csv()


# -- curves -------------------------------------------------------------------

def test_curve_csv_rejects_gaps():
    text = ("epoch,split,l_total,l_classif,l_segm,l_recon,l_detect,metric_name,metric_value\n"
            "1,train,1.0,0.5,NA,0.5,NA,accuracy,0.5\n"
            "3,train,1.0,0.5,NA,0.5,NA,accuracy,0.5\n")
    with pytest.raises(DatasetFormatError, match="contiguous"):
        TrainingCurve.from_csv(text)
    with pytest.raises(DatasetFormatError, match="line 1"):
        TrainingCurve.from_csv("epoch,loss\n")


# -- checkpoints --------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, cr_small):
    params = init_params(SPEC, {"cls", "recon"}, 0)
    res = run_stage(cfg("CR", epochs=1), (cr_small[:4], cr_small[4:6]), params)
    save_checkpoint(res.params, res.curve, tmp_path / "ck")
    loaded, curve = load_checkpoint(tmp_path / "ck")
    assert loaded.equals(res.params)
    assert curve.to_csv() == res.curve.to_csv()
    save_checkpoint(loaded, curve, tmp_path / "ck2")
    assert (tmp_path / "ck" / "weights.bin").read_bytes() == \
        (tmp_path / "ck2" / "weights.bin").read_bytes()


def test_checkpoint_errors(tmp_path):
    params = init_params(SPEC, {"seg"}, 0)
    save_checkpoint(params, None, tmp_path / "ck")
    with pytest.raises(TransferError):
        load_checkpoint(tmp_path / "ck", expected=RES)
    blob = tmp_path / "ck" / "weights.bin"
    blob.write_bytes(blob.read_bytes()[:100])
    with pytest.raises(DatasetFormatError):
        load_checkpoint(tmp_path / "ck")
    with pytest.raises(DatasetFormatError):
        load_checkpoint(tmp_path / "nowhere")


# -- pipeline -----------------------------------------------------------------

def _splits(samples, n_train):
    return (samples[:n_train], samples[n_train:n_train + 2], samples[n_train + 2:])


def test_pipeline_transfers_best_cr_weights(tmp_path, cr_small, sr_small):
    stages = [cfg("CR", epochs=2), cfg("SR", epochs=0)]
    report = run_pipeline(stages, [_splits(cr_small, 8), _splits(sr_small, 3)], tmp_path)
    cr_best = load_params(tmp_path / "CR" / "best")
    sr_init = report["SR"].result.params  # zero epochs: the preloaded initial weights
    for name in sr_init:
        if name.startswith(("encoder.", "recon.")):
            assert np.array_equal(sr_init[name], cr_best[name]), name
    fresh = init_params(SPEC, {"seg", "recon"}, 0)
    assert np.array_equal(sr_init["seg.out.weight"], fresh["seg.out.weight"])
    assert report["SR"].preload_source == "stage:CR"
    top = json.loads((tmp_path / "report.json").read_text())
    assert [s["name"] for s in top["stages"]] == ["CR", "SR"]
    assert (tmp_path / "CR" / "curve.csv").is_file()
    assert math.isfinite(report["CR"].test_metric)


def test_pipeline_without_preload_uses_fresh_init(tmp_path, cr_small, sr_small):
    stages = [cfg("CR", epochs=1), cfg("SR", epochs=0, preload=None)]
    report = run_pipeline(stages, [_splits(cr_small, 8), _splits(sr_small, 3)], tmp_path)
    assert report["SR"].result.params.equals(init_params(SPEC, {"seg", "recon"}, 0))
    assert report["SR"].transferred == []


def test_bad_stage_reference_fails_before_training(tmp_path, sr_small):
    stages = [cfg("SR", preload=Preload("stage:CR", ("encoder",)))]
    with pytest.raises(ConfigurationError, match="stage:CR"):
        run_pipeline(stages, [_splits(sr_small, 3)], tmp_path)
    assert not (tmp_path / "SR").exists()


def test_missing_external_preload(tmp_path, sr_small):
    stages = [cfg("SR", preload=Preload(str(tmp_path / "absent")))]
    with pytest.raises(ConfigurationError):
        run_pipeline(stages, [_splits(sr_small, 3)], tmp_path / "out")


def test_backbone_mismatch_across_stages(tmp_path, cr_small, sr_small):
    stages = [cfg("CR", epochs=1), cfg("SR", epochs=1, backbone=RES)]
    with pytest.raises(TransferError):
        run_pipeline(stages, [_splits(cr_small, 8), _splits(sr_small, 3)], tmp_path)
