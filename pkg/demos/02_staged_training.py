# %% [markdown]
# # Staged training with weight transfer
#
# Training runs in stages. Classification plus reconstruction (CR) comes
# first, then segmentation plus reconstruction (SR). The SR stage starts from
# the best CR encoder and reconstruction decoder. This demo runs at a tiny
# scale (32 px, width 1/8), so it finishes in well under a minute.

# %%
import tempfile
from pathlib import Path

import numpy as np
import torch

from mtlab.datakit import generate_phantoms, split, SplitSpec
from mtlab.metrics import segmentation_report
from mtlab.nets import BackboneSpec, load_params
from mtlab.trainer import Preload, StageConfig, predict, run_pipeline

torch.set_num_threads(1)
spec = BackboneSpec("vgg13_style", width=1 / 8, input_size=32)
cr_data = split(generate_phantoms(24, "CR", 1, size=32), SplitSpec(0.7, 0.15, 0.15, seed=1))
sr_data = split(generate_phantoms(16, "SR", 2, size=32), SplitSpec(0.7, 0.15, 0.15, seed=2))

# %%
stages = [
    StageConfig("CR", epochs=4, batch_size=4, learning_rate=1e-3, backbone=spec, preload=None),
    StageConfig("SR", epochs=6, batch_size=2, learning_rate=1e-3, backbone=spec,
                preload=Preload("stage:CR", ("encoder", "recon"))),
]
out = Path(tempfile.mkdtemp()) / "run"
report = run_pipeline(stages, [cr_data, sr_data], out)
for stage in report.stages:
    print(stage.name, "best epoch", stage.result.best_epoch, "copied", len(stage.transferred),
          "arrays")

# %% [markdown]
# Each stage leaves `best/` and `final/` checkpoints plus `curve.csv`.

# %%
print(sorted(p.name for p in (out / "SR").iterdir()))
print((out / "SR" / "curve.csv").read_text().splitlines()[:3])

# %%
best = load_params(out / "SR" / "best")
probs = predict(best, sr_data[2], "seg")
rep = segmentation_report(probs, np.stack([s.seg_mask for s in sr_data[2]]))
print(f"test F1 {rep.f1:.3f}, IoU {rep.iou:.3f}, ROC AUC {rep.roc_auc}")
