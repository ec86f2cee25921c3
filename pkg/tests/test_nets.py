import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck_util import check_head
from mtlab.boxes import nms
from mtlab.errors import ArgumentError, DatasetFormatError, StateError, TransferError
from mtlab.nets import (BackboneSpec, FeaturePyramid, decode_cls, decode_recon, decode_seg,
                        detect, encode, init_params, load_params, param_shapes, save_params,
                        transfer_weights)

TINY = BackboneSpec("vgg13_style", width=1 / 8, input_size=32)
TINY_RES = BackboneSpec("resnet50_style", width=1 / 16, input_size=32, blocks=(1, 1, 1, 1))


@pytest.fixture(scope="module")
def full_store():
    return init_params(TINY, {"cls", "seg", "recon", "det"}, 0)


@pytest.fixture(scope="module")
def image():
    return np.random.default_rng(5).random((32, 32)).astype(np.float32)


# -- parameter store ----------------------------------------------------------

def test_prefix_contract():
    store = init_params(BackboneSpec("vgg13_style"), {"cls"}, 0)
    assert {n.split(".")[0] for n in store} == {"encoder", "cls"}


def test_init_is_deterministic():
    a = init_params(TINY, {"seg", "recon"}, 3)
    b = init_params(TINY, {"seg", "recon"}, 3)
    assert a.equals(b)
    assert not a.equals(init_params(TINY, {"seg", "recon"}, 4))


def test_init_is_finite_with_zero_biases(full_store):
    for name, arr in full_store.items():
        assert np.all(np.isfinite(arr)), name
        if name.endswith(".bias"):
            assert not arr.any()


def test_empty_heads_rejected():
    with pytest.raises(ArgumentError):
        init_params(TINY, set(), 0)


def test_resnet_stage_widths_match_reference_table():
    spec = BackboneSpec("resnet50_style")
    assert spec.stage_channels == (64, 256, 512, 1024, 2048)
    store = init_params(spec, {"seg", "recon"}, 1)
    assert store["encoder.block5.unit3.conv3.weight"].shape[0] == 2048
    assert sum(1 for n in store if n.endswith(".conv3.weight")) == 3 + 4 + 6 + 3
    assert BackboneSpec("vgg13_style").stage_channels == (64, 128, 256, 512, 512)


def test_store_is_read_only(full_store):
    with pytest.raises(ValueError):
        full_store["cls.fc1.bias"][0] = 1.0


def test_checkpoint_round_trip_is_bitwise(tmp_path, full_store):
    save_params(full_store, tmp_path / "ck")
    again = load_params(tmp_path / "ck")
    assert again.equals(full_store) and again.spec == TINY
    blob = (tmp_path / "ck" / "weights.bin").read_bytes()
    expected = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in full_store.values())
    assert blob == expected


def test_truncated_weights_rejected(tmp_path, full_store):
    save_params(full_store, tmp_path / "ck")
    path = tmp_path / "ck" / "weights.bin"
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(DatasetFormatError):
        load_params(tmp_path / "ck")


def test_load_into_other_backbone_rejected(tmp_path, full_store):
    save_params(full_store, tmp_path / "ck")
    with pytest.raises(TransferError):
        load_params(tmp_path / "ck", expected=TINY_RES)


# -- encoder ------------------------------------------------------------------

def test_full_size_pyramid_shapes():
    store = init_params(BackboneSpec("vgg13_style"), {"cls"}, 0)
    pyr = encode(store, np.zeros((256, 256, 1), np.float32))
    assert pyr.shapes == [(64, 256, 256), (128, 128, 128), (256, 64, 64), (512, 32, 32),
                          (512, 16, 16)]
    assert all(np.all(np.isfinite(level)) for level in pyr.levels)


@pytest.mark.parametrize("spec", [TINY, TINY_RES])
def test_pyramid_contract_both_backbones(spec, image):
    store = init_params(spec, {"cls"}, 0)
    pyr = encode(store, image)
    assert pyr.shapes == spec.pyramid_shapes
    for k, (c, h, w) in enumerate(pyr.shapes):
        assert (h, w) == (32 >> k, 32 >> k)
        assert c == spec.stage_channels[k]


def test_wrong_input_size_rejected(full_store):
    with pytest.raises(ArgumentError):
        encode(full_store, np.zeros((16, 16), np.float32))


def test_encoder_weight_perturbation_changes_pyramid(full_store, image):
    before = encode(full_store, image)
    w = full_store["encoder.block2.conv1.weight"].copy()
    w.flat[7] += 0.5
    after = encode(full_store.replace({"encoder.block2.conv1.weight": w}), image)
    assert any(not np.array_equal(a, b) for a, b in zip(before.levels, after.levels))


def test_forward_is_pure(full_store, image):
    a, b = encode(full_store, image), encode(full_store, image)
    assert all(np.array_equal(x, y) for x, y in zip(a.levels, b.levels))
    assert np.array_equal(decode_cls(full_store, a), decode_cls(full_store, b))


# -- heads --------------------------------------------------------------------

def test_seg_output_range_and_shape(full_store, image):
    out = decode_seg(full_store, encode(full_store, image))
    assert out.shape == (32, 32)
    assert np.all(out > 0) and np.all(out < 1)


@pytest.mark.parametrize("level", range(4))
def test_every_skip_connection_is_wired(full_store, image, level):
    pyr = encode(full_store, image)
    base = decode_seg(full_store, pyr)
    levels = list(pyr.levels)
    levels[level] = np.zeros_like(levels[level])
    assert not np.array_equal(base, decode_seg(full_store, FeaturePyramid(levels)))


def test_recon_is_not_clamped(full_store, image):
    pyr = encode(full_store, image)
    out = decode_recon(full_store, pyr)
    assert out.shape == (32, 32) and np.all(np.isfinite(out))
    shifted = full_store.replace({"recon.out.bias": np.array([1.5], np.float32)})
    assert decode_recon(shifted, pyr).max() > 1.0


def test_cls_is_a_distribution(full_store, image):
    probs = decode_cls(full_store, encode(full_store, image))
    assert probs.shape == (3,)
    assert np.all(probs >= 0) and abs(probs.sum() - 1) <= 1e-6


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.0, 50.0))
def test_fuzzed_output_ranges(seed, scale):
    store = init_params(TINY, {"cls", "seg"}, seed)
    img = (np.random.default_rng(seed).random((32, 32)) * scale).astype(np.float32)
    pyr = encode(store, img)
    probs = decode_cls(store, pyr)
    assert abs(probs.sum() - 1) <= 1e-6 and np.all(probs >= 0)
    seg = decode_seg(store, pyr)
    assert np.all(seg > 0) and np.all(seg < 1)


def test_missing_head_is_state_error(image):
    store = init_params(TINY, {"cls"}, 0)
    pyr = encode(store, image)
    with pytest.raises(StateError):
        decode_seg(store, pyr)
    with pytest.raises(StateError):
        detect(store, pyr)


# -- detection ----------------------------------------------------------------

def test_nms_suppresses_overlapping_lower_score():
    boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 9]], float)  # IoU 0.9
    assert list(nms(boxes, np.array([0.8, 0.6]), 0.5)) == [0]
    assert list(nms(boxes, np.array([0.6, 0.8]), 0.5)) == [1]


@pytest.mark.parametrize("threshold", [0.0, 0.3, 1.0])
def test_detect_contract(full_store, image, threshold):
    dets = detect(full_store, encode(full_store, image), threshold, max_detections=5)
    assert len(dets) <= 5
    scores = [d.score for d in dets]
    assert scores == sorted(scores, reverse=True)
    for d in dets:
        x0, y0, x1, y1 = d.box
        assert 0 <= x0 < x1 <= 32 and 0 <= y0 < y1 <= 32
        assert threshold <= d.score <= 1
        assert d.mask.ndim == 2 and set(np.unique(d.mask)) <= {0, 1}


def test_detect_threshold_validated(full_store, image):
    with pytest.raises(ArgumentError):
        detect(full_store, encode(full_store, image), 1.5)


# -- transfer -----------------------------------------------------------------

def test_transfer_copies_only_requested_prefix():
    cr = init_params(TINY, {"cls", "recon"}, 1)
    sr = init_params(TINY, {"seg", "recon"}, 2)
    out, report = transfer_weights(cr, sr, {"encoder"})
    for name in out:
        if name.startswith("encoder."):
            assert np.array_equal(out[name], cr[name])
        else:
            assert np.array_equal(out[name], sr[name])
    assert report["copied"] and all(n.startswith("encoder.") for n in report["copied"])


def test_empty_prefix_set_is_identity():
    a, b = init_params(TINY, {"seg"}, 1), init_params(TINY, {"seg"}, 2)
    out, report = transfer_weights(a, b, set())
    assert out.equals(b) and report["copied"] == []


def test_transfer_is_idempotent():
    a, b = init_params(TINY, {"seg", "recon"}, 1), init_params(TINY, {"seg", "recon"}, 2)
    once, _ = transfer_weights(a, b, {"encoder", "recon"})
    twice, _ = transfer_weights(a, once, {"encoder", "recon"})
    assert once.equals(twice)


def test_cross_backbone_transfer_fails_naming_parameter():
    vgg = init_params(BackboneSpec("vgg13_style", 1 / 8, 32), {"seg"}, 0)
    res = init_params(BackboneSpec("resnet50_style", 1 / 8, 32), {"seg"}, 0)
    with pytest.raises(TransferError, match=r"encoder\."):
        transfer_weights(vgg, res, {"encoder"})


def test_param_shapes_partitioned_by_prefix():
    names = param_shapes(TINY, {"cls", "seg", "recon", "det"})
    assert {n.split(".")[0] for n in names} == {"encoder", "cls", "seg", "recon", "det"}


# -- gradients ----------------------------------------------------------------

@pytest.mark.parametrize("head", ["cls", "seg", "recon", "det"])
def test_gradients_match_central_differences(head):
    worst, n, _ = check_head(head)
    assert n >= 100
    assert worst <= 1e-4


@pytest.mark.parametrize("head", ["seg", "det"])
def test_residual_backbone_gradients(head):
    worst, n, _ = check_head(head, kind="resnet50_style", n_params=100)
    assert worst <= 1e-4
