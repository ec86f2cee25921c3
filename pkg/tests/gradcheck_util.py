"""Central-difference gradient checks on a miniature float64 network."""
import numpy as np

from mtlab.datakit import ClassLabel, DetClass, Instance, Sample
from mtlab.losses import TaskWeights
from mtlab.nets import BackboneSpec, init_params
from mtlab.trainer.loop import loss_and_grads, loss_value

HEAD_WEIGHTS = {
    "cls": TaskWeights(1, 0, 0, 0),
    "seg": TaskWeights(0, 1, 0, 0),
    "recon": TaskWeights(0, 0, 1, 0),
    "det": TaskWeights(0, 0, 0, 1),
}
EPS = 1e-6
# Relative error is |a - n| / max(|a| + |n|, FLOOR); the floor keeps entries whose true
# gradient is ~0 from dividing round-off noise by round-off noise.
FLOOR = 1e-6


def mini_samples(size=16):
    rng = np.random.default_rng(0)
    samples = []
    for k in range(2):
        image = rng.random((size, size)).astype(np.float32)
        seg = np.zeros((size, size), np.uint8)
        seg[3 + k:9 + k, 4:10] = 1
        inst_mask = np.zeros((size, size), np.uint8)
        inst_mask[2 + 2 * k:10, 3:11 - k] = 1
        samples.append(Sample(image, f"g{k}", ClassLabel.from_index(k), seg,
                              [Instance(DetClass.from_index(k), inst_mask)]))
    return samples


def check_head(head, kind="vgg13_style", n_params=120, seed=0, size=16):
    """Return (max relative error, number of checked entries, groups covered)."""
    spec = BackboneSpec(kind, width=1 / 8, input_size=size, blocks=(1, 1, 1, 1))
    params = init_params(spec, {head}, seed, dtype=np.float64)
    samples = mini_samples(size)
    weights = HEAD_WEIGHTS[head]
    _, grads, fixed = loss_and_grads(params, samples, weights, seed=seed)
    rng = np.random.default_rng(seed)
    groups = [n for n in params if n in grads]
    picks = [(n, int(rng.integers(params[n].size))) for n in groups]
    while len(picks) < n_params:
        n = groups[int(rng.integers(len(groups)))]
        picks.append((n, int(rng.integers(params[n].size))))
    worst = 0.0
    for name, idx in picks:
        base = params[name]
        vals = []
        for sign in (1.0, -1.0):
            arr = base.copy()
            arr.flat[idx] += sign * EPS
            vals.append(loss_value(params.replace({name: arr}), samples, weights, fixed, seed))
        numeric = (vals[0] - vals[1]) / (2 * EPS)
        analytic = float(grads[name].flat[idx])
        err = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), FLOOR)
        worst = max(worst, err)
    return worst, len(picks), len(groups)
