"""
Training an ensemble patch and measuring what it does
=====================================================

Optimize one patch against toy_a and toy_b together, then evaluate it on
all three detectors next to the gray, noise and white controls. toy_c never
sees the patch during training, so its row measures transfer.
"""

# %%
import os
from dataclasses import replace
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from enspatch import cli
from enspatch.core import save_patch
from enspatch.evaluation import evaluate_attack
from enspatch.trainer import train

torch.set_num_threads(1)
ROOT = Path(__file__).resolve().parent.parent
OUT = Path(os.environ.get("DEMO_OUT", "demo_out"))
OUT.mkdir(parents=True, exist_ok=True)

rc = cli.load_run_config(ROOT / "configs" / "toy.yaml")
train_set = cli.load_manifest(rc.dataset, "train")
eval_set = cli.load_manifest(rc.eval_dataset, "eval")
detectors = {mid: cli.build_detector(rc, mid) for mid in rc.detectors}

# %% [markdown]
# 400 iterations of batch 16 take well under a minute. The log keeps the
# per-surrogate losses and the mixture weights, so the weight dynamics
# can be plotted afterwards.

# %%
config = replace(rc.train, seed=0)
patch, log = train(config, train_set, [detectors[m] for m in rc.surrogates])
save_patch(patch, OUT / "ensemble_patch.png")

fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.5))
ax1.plot(log.column("l_total"), lw=0.8)
ax1.set_xlabel("iteration")
ax1.set_ylabel("ensemble loss")
alphas = list(zip(*log.column("alphas")))
for mid, a in zip(rc.surrogates, alphas):
    ax2.plot(a, label=mid)
ax2.set_xlabel("iteration")
ax2.set_ylabel("weight")
ax2.legend()
fig.tight_layout()
fig.savefig(OUT / "training.png", dpi=100)

# %% [markdown]
# With the default step size the weight of the surrogate with the larger
# loss shrinks steadily; by the end nearly all weight sits on the easier
# one. The evaluation below places the patch at the ground-truth boxes and
# replays the same placements for the controls.

# %%
report = evaluate_attack(patch, eval_set, None, list(detectors.values()), rc.eval_placement, seed=0)
print(report.render_text())
cli.plot_report(report, OUT / "map_bars.png")

fig, ax = plt.subplots(figsize=(3, 3))
ax.imshow(patch.pixels)
ax.set_title("learned patch")
ax.axis("off")
fig.savefig(OUT / "patch_preview.png", dpi=100)
print("figures in", OUT)
