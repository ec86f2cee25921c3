# %% [markdown]
# # Phantoms, preprocessing and metrics
#
# The lab ships its own synthetic CT-like slices. Three profiles exist:
# `CR` carries a class label, `SR` a lesion mask, `DR` lesion instances
# with boxes. Everything is reproducible from a seed.

# %%
import numpy as np

from mtlab.datakit import (TABLE1_COUNTS, SplitSpec, TaskProfile, augment, equalize_histogram,
                           generate_phantoms, split, split_sizes)
from mtlab.metrics import box_iou, segmentation_report

cr = generate_phantoms(6, "CR", seed=0, size=64)
sr = generate_phantoms(4, "SR", seed=0, size=64)
dr = generate_phantoms(4, "DR", seed=0, size=64)
print([s.class_label.value for s in cr])
print("lesion pixels:", [int(s.seg_mask.sum()) for s in sr])
for inst in dr[0].instances:
    print(inst.det_class.value, inst.box)

# %% [markdown]
# Histogram equalization maps intensities through their empirical CDF, so the
# output is close to uniform on [0, 1] whatever the input distribution.

# %%
raw = np.random.default_rng(1).gamma(2.0, 10.0, size=(64, 64))
eq = equalize_histogram(raw)
print(np.histogram(eq, bins=4, range=(0, 1))[0])

# %% [markdown]
# Splits use fixed train/validation/test fractions per profile; the counts
# below are what a full-size dataset would produce.

# %%
for profile, n in ((TaskProfile.CR, 1816), (TaskProfile.SR, 472), (TaskProfile.DR, 99)):
    print(profile.value, split_sizes(n, SplitSpec.from_counts(*TABLE1_COUNTS[profile])))
train, valid, test = split(sr, SplitSpec(0.5, 0.25, 0.25, seed=3))
print(len(train), len(valid), len(test))

# %% [markdown]
# Augmentations move the image and every annotation together, and boxes are
# recomputed from the warped masks.

# %%
moved = augment(dr[0], ["elastic", "rotate_small", "crop"], seed=7)
print([inst.box for inst in moved.instances])

# %% [markdown]
# A blurred copy of the true mask stands in for a network prediction.

# %%
from scipy.ndimage import gaussian_filter

truth = sr[0].seg_mask
pred = np.clip(gaussian_filter(truth.astype(float), 1.5), 1e-3, 1 - 1e-3)
rep = segmentation_report(pred, truth)
print({k: round(v, 3) for k, v in rep.table_row().items()})
print("IoU of two half-overlapping boxes:", box_iou((0, 0, 4, 4), (2, 0, 6, 4)))
