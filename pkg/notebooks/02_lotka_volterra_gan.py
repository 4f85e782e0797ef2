# %% [markdown]
# # Learning predator-prey increments with a conditional GAN
#
# Train the scaled network profile on synthetic Lotka-Volterra cases, then
# compare pooled terminal states of generator rollouts with the integrator.
# Set GANTRACK_ITERS to train longer (the default keeps the script short).

# %%
import os

import numpy as np

from gantrack import baselines as bl
from gantrack import evalsuite as ev
from gantrack import gameopt as go
from gantrack import lvsys, nets

iters = int(os.environ.get("GANTRACK_ITERS", "300"))
train = lvsys.sample_dataset(200, 1000).pairs()
val = lvsys.sample_dataset(20, 5000).pairs().subset(np.arange(256))
print(len(train), "training pairs; history window", train.histories.shape[1:])

# %% [markdown]
# One case: 10 history steps before s0 and 40 steps after it.

# %%
case = lvsys.case_trajectory(lvsys.LVConfig(3.5, 4.0, 4.5, 3.2, 2.0, 1.5))
print(np.round(case.states[::10], 3))

# %%
model = nets.GANModel(nets.profile("scaled"), seed=0)
cfg = go.OptimizerConfig(alpha=0.01, gamma=0.33, iterations=iters, log_every=max(iters // 6, 1), seed=0)
log = go.train(model, train, cfg, val=val)
its, maes = log.curve()
for i, m in zip(its, maes):
    print(f"iteration {int(i):5d}  validation MAE {m:.4f}")

# %% [markdown]
# Pooled terminal-state distributions over 20 parameter draws with 50
# rollouts each.  The CAM extrapolator serves as the reference to beat.

# %%
gan = ev.evaluate_distribution(ev.constant(model.policy()), m=20, n=50, T=40, seed=0)
cam = ev.evaluate_distribution(ev.constant(bl.CAMPolicy()), m=20, n=50, T=40, seed=0)
for g, c in zip(gan, cam):
    print(f"{g.variable}: mean pred {g.predicted.mean():.3f} true {g.truth.mean():.3f}   "
          f"W1 generator {g.w1:.3f}  W1 CAM {c.w1:.3f}")

# %%
edges, counts_pred, counts_true = gan[0].histogram()
for lo, cp, ct in zip(edges[:-1], counts_pred, counts_true):
    print(f"{lo:7.2f}  {'#' * int(60 * cp / counts_pred.sum()):<30s} {'*' * int(60 * ct / counts_true.sum())}")
