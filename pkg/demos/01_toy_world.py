"""
The toy world: shapes, detectors and a first look at a patch
============================================================

Everything runs on a laptop CPU. The synthetic scenes are dark noisy
backgrounds with bright rectangles, disks and triangles; three small grid
detectors are trained on them once and cached (set ENSPATCH_CACHE to
choose where). Figures go to ``demo_out/`` unless DEMO_OUT says otherwise.
"""

# %%
import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from enspatch import cli
from enspatch.compositor import PlacementSpec, place_patch
from enspatch.core import init_patch
from enspatch.evaluation import compute_map

torch.set_num_threads(1)
ROOT = Path(__file__).resolve().parent.parent
OUT = Path(os.environ.get("DEMO_OUT", "demo_out"))
OUT.mkdir(parents=True, exist_ok=True)

# %% [markdown]
# The bundled config describes the datasets, the three detector
# architectures and the attack settings. Loading it validates everything
# up front.

# %%
rc = cli.load_run_config(ROOT / "configs" / "toy.yaml")
train_set = cli.load_manifest(rc.dataset, "train")
eval_set = cli.load_manifest(rc.eval_dataset, "eval")
print(f"{len(train_set)} training scenes, {len(eval_set)} evaluation scenes, classes {eval_set.class_names}")

# %% [markdown]
# Train (or load from the cache) the detectors. The first run takes a
# minute or two.

# %%
detectors = {mid: cli.build_detector(rc, mid, print) for mid in rc.detectors}
for mid, det in detectors.items():
    res = compute_map(det.detect_batch(eval_set.images()), eval_set.ground_truth())
    print(f"{mid}: clean mAP@0.45 = {100 * res.map:.1f}")

# %% [markdown]
# A gray square at each object hardly matters to a detector: that is the
# baseline an optimized patch has to beat.

# %%
gray = init_patch(rc.train.patch_size, "gray")
spec = PlacementSpec(relative_scale=0.3, rotation_range=0.0)
fig, axes = plt.subplots(2, 4, figsize=(10, 5))
det = detectors["toy_c"]
for k in range(4):
    x = eval_set.image(k)
    adv, _ = place_patch(x, det.detect(x), gray, spec, seed=k)
    for row, im in enumerate((x, adv)):
        ax = axes[row, k]
        ax.imshow(im.pixels)
        for d in det.detect(im):
            b = d.box
            ax.add_patch(plt.Rectangle((b.x1, b.y1), b.width, b.height, fill=False, color="lime", lw=1))
        ax.axis("off")
axes[0, 0].set_title("clean")
axes[1, 0].set_title("gray patch")
fig.tight_layout()
fig.savefig(OUT / "toy_world.png", dpi=100)
print("wrote", OUT / "toy_world.png")
