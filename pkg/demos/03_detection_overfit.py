# %% [markdown]
# # Watching a detector overfit
#
# The detection stage trains the RPN, box, class and mask heads together with
# reconstruction. On a small phantom set without augmentation, training loss
# keeps falling while validation loss turns upward. The preset below runs the
# experiment at `ci` scale; `--scale desk` is the real-size version (minutes).

# %%
import json
import tempfile
from pathlib import Path

from mtlab.cli import main
from mtlab.trainer import TrainingCurve
from mtlab.trainer.presets import moving_average, overfit_shape

out = Path(tempfile.mkdtemp())
main(["train", "--preset", "fig3_detection_overfit", "--scale", "ci", "--out", str(out)])

# %%
summary = json.loads((out / "summary.json").read_text())
curve_path = next(out.rglob("DR/curve.csv"))
curve = TrainingCurve.load(curve_path)
print("train l_detect", [round(v, 3) for v in curve.series("train", "l_detect")])
print("valid l_detect", [round(v, 3) for v in curve.series("valid", "l_detect")])
print("smoothed train", moving_average(curve.series("train", "l_detect"), 2).round(3))
print({k: v for k, v in overfit_shape(curve).items() if k.startswith("valid")})

# %% [markdown]
# The same curve can be charted as SVG files, together with a merged CSV.

# %%
main(["plot", str(curve_path), "--labels", "DR", "--out", str(out / "plots")])
print(sorted(p.name for p in (out / "plots").iterdir()))
