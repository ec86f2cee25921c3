import itertools
import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mtlab.datakit import DetClass, Instance
from mtlab.errors import ArgumentError
from oracles import dice_oracle

from mtlab.losses import (DetectionLossBundle, LossBundle, TaskWeights, cce, detection_loss,
                          generalized_dice, mse, total_loss)

ALL_WEIGHTS = [TaskWeights(*w) for w in itertools.product((0, 1), repeat=4)]


# -- cce / mse ----------------------------------------------------------------

def test_cce_cases():
    assert float(cce([1.0, 0.0, 0.0], 0)) <= 1e-6
    assert math.isclose(float(cce([1 / 3] * 3, 2)), math.log(3), abs_tol=1e-12)
    assert math.isclose(float(cce([0.7, 0.2, 0.1], 1)), -math.log(0.2), abs_tol=1e-12)
    assert math.isclose(float(cce([1.0, 0.0, 0.0], 1)), -math.log(1e-7), rel_tol=1e-9)


@pytest.mark.parametrize("bad", [3, -1])
def test_cce_rejects_bad_target(bad):
    with pytest.raises(ArgumentError):
        cce([0.2, 0.3, 0.5], bad)


def test_mse_cases():
    rng = np.random.default_rng(1)
    t = rng.random((8, 8))
    assert float(mse(t, t)) == 0.0
    assert abs(float(mse(t + 0.1, t)) - 0.01) <= 1e-9
    p = rng.random((8, 8))
    loop = sum((p[i, j] - t[i, j]) ** 2 for i in range(8) for j in range(8)) / 64
    assert abs(float(mse(p, t)) - loop) <= 1e-9
    with pytest.raises(ArgumentError):
        mse(p, t[:4])


# -- generalized Dice ---------------------------------------------------------

def test_dice_oracle_on_1000_random_pairs():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        h, w = rng.integers(1, 17, size=2)
        target = (rng.random((h, w)) < rng.random()).astype(float)
        pred = rng.random((h, w))
        worst = max(worst, abs(float(generalized_dice(pred, target)) - dice_oracle(pred, target)))
    assert worst <= 1e-6


@pytest.mark.parametrize("size,lesion", [(2, 1), (6, 9), (16, 1), (16, 100), (16, 255)])
def test_dice_extremes(size, lesion):
    t = np.zeros(size * size)
    t[:lesion] = 1
    t = np.random.default_rng(lesion).permutation(t).reshape(size, size)
    assert abs(float(generalized_dice(t, t))) <= 1e-6
    assert abs(float(generalized_dice(1 - t, t)) - 1) <= 1e-6


def test_dice_frozen_fixture():
    target = np.zeros((4, 4))
    target[0, :3] = 1
    # exact rational value without the epsilon terms is 89/128
    assert abs(float(generalized_dice(np.full((4, 4), 0.5), target)) - 89 / 128) <= 1e-6
    assert abs(dice_oracle(np.full((4, 4), 0.5), target) - 89 / 128) <= 1e-6


def test_dice_shape_mismatch():
    with pytest.raises(ArgumentError):
        generalized_dice(np.zeros((4, 4)), np.zeros((4, 5)))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), h=st.integers(1, 12), w=st.integers(1, 12))
def test_dice_bounded_and_monotone_along_segment(seed, h, w):
    rng = np.random.default_rng(seed)
    target = (rng.random((h, w)) < 0.4).astype(float)
    pred = rng.random((h, w))
    values = [float(generalized_dice(pred + t * (target - pred), target))
              for t in np.linspace(0, 1, 6)]
    assert all(-1e-9 <= v <= 1 + 1e-9 for v in values)
    assert all(b <= a + 1e-9 for a, b in zip(values, values[1:]))


# -- total loss ---------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1e3, allow_nan=False), min_size=4, max_size=4))
def test_total_loss_algebra_all_weight_vectors(vals):
    comps = dict(zip(("classif", "segm", "recon", "detect"), vals))
    for w in ALL_WEIGHTS:
        explicit = sum(wi * v for wi, v in zip(w.as_tuple(), vals))
        assert abs(total_loss(comps, w).l_total - explicit) <= 1e-9
        for k in range(4):
            flipped = list(w.as_tuple())
            flipped[k] = 1 - flipped[k]
            delta = total_loss(comps, TaskWeights(*flipped)).l_total - total_loss(comps, w).l_total
            assert abs(abs(delta) - vals[k]) <= 1e-9


def test_total_loss_examples():
    assert total_loss({"classif": 0.5, "recon": 0.1}, TaskWeights(1, 0, 1, 0)).l_total == 0.6
    assert total_loss({}, TaskWeights(0, 0, 0, 0)).l_total == 0
    full = dict(classif=0.5, segm=0.2, recon=0.1, detect=0.3)
    assert abs(total_loss(full, TaskWeights(1, 1, 1, 1)).l_total - 1.1) <= 1e-12
    bundle = total_loss(LossBundle(l_classif=0.5, l_recon=0.25), TaskWeights(1, 0, 0, 0))
    assert bundle.l_total == 0.5 and bundle.l_recon == 0.25


def test_total_loss_missing_component():
    with pytest.raises(ArgumentError):
        total_loss({"classif": 0.5}, TaskWeights(1, 1, 0, 0))


@pytest.mark.parametrize("bad", [2, -1, 0.5])
def test_task_weights_binary(bad):
    with pytest.raises(ArgumentError):
        TaskWeights(bad, 0, 0, 0)


# -- detection ----------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1e6, allow_nan=False), min_size=3, max_size=3))
def test_detection_bundle_identity(vals):
    b = DetectionLossBundle(*vals)
    assert b.l_detect == vals[0] + vals[1] + vals[2]


def test_bundle_example():
    assert abs(DetectionLossBundle(0.1, 0.2, 0.3).l_detect - 0.6) <= 1e-15


def _outputs(anchors, rois, rpn_logit, class_logits, mask_logit, m=14):
    r = len(rois)
    proposals = SimpleNamespace(
        anchors=np.asarray(anchors, float),
        rpn_logits=torch.tensor(rpn_logit, dtype=torch.float64),
        rpn_deltas=torch.zeros((len(anchors), 4), dtype=torch.float64),
        rois=np.asarray(rois, float).reshape(-1, 4))
    heads = SimpleNamespace(
        class_logits=torch.tensor(class_logits, dtype=torch.float64).reshape(r, 4),
        box_deltas=torch.zeros((r, 4), dtype=torch.float64),
        mask_logits=torch.full((r, 3, m, m), mask_logit, dtype=torch.float64))
    return proposals, heads


def test_perfect_anchor_gives_near_zero_loss():
    mask = np.zeros((32, 32), np.uint8)
    mask[8:20, 6:18] = 1
    gt = [Instance(DetClass.EFFUSION_LIKE, mask)]
    box = list(gt[0].box)
    far = [24, 24, 31, 31]  # IoU 0 with the GT box -> background anchor
    logits = [0.0] * 4
    logits[1 + DetClass.EFFUSION_LIKE.index] = 30.0
    proposals, heads = _outputs([box, far], [box], [30.0, -30.0], [logits], 30.0)
    out = detection_loss(proposals, heads, gt)
    assert float(out.l_detect) <= 1e-3
    assert float(out.l_bbox) == 0.0


def test_no_instance_image_has_only_classification_term():
    proposals, heads = _outputs([[0, 0, 8, 8], [4, 4, 12, 12]], [[0, 0, 8, 8]],
                                [0.3, -0.2], [[0.5, 0.1, 0.0, -0.1]], 0.7)
    out = detection_loss(proposals, heads, [])
    assert float(out.l_bbox) == 0.0 and float(out.l_mask) == 0.0
    assert float(out.l_detect) == float(out.l_rpn_and_head_classif) > 0


def test_detection_terms_are_nonnegative_and_sum_exactly():
    rng = np.random.default_rng(3)
    mask = np.zeros((32, 32), np.uint8)
    mask[4:14, 10:22] = 1
    gt = [Instance(DetClass.GGO_LIKE, mask)]
    anchors = [[4, 4, 16, 16], [10, 4, 22, 14], [0, 20, 12, 32]]
    rois = [[9, 3, 21, 15], [0, 0, 6, 6]]
    proposals, heads = _outputs(anchors, rois, rng.normal(size=3).tolist(),
                                rng.normal(size=(2, 4)).tolist(), 0.1)
    heads.box_deltas = torch.tensor(rng.normal(size=(2, 4)))
    out = detection_loss(proposals, heads, gt)
    parts = [float(out.l_rpn_and_head_classif), float(out.l_bbox), float(out.l_mask)]
    assert all(p > 0 for p in parts)
    assert float(out.l_detect) == float(out.l_rpn_and_head_classif + out.l_bbox + out.l_mask)
