# %% [markdown]
# # Simultaneous gradient ascent vs. consensus steps on f(theta, phi) = theta * phi
#
# The two-player bilinear game is the smallest setting where plain
# simultaneous updates spiral outward.  Adding the gradient of
# 0.5 * |v|^2 pulls the iterates back toward the equilibrium at the origin.

# %%
import numpy as np

from gantrack import gameopt as go

alpha = 0.1

# %% [markdown]
# Raw mode (no RMSProp scaling) so the per-step factors can be read off directly.

# %%
def run(gamma, steps=60):
    game = go.BilinearGame(1.0, 1.0)
    cfg = go.OptimizerConfig(alpha=alpha, gamma=gamma, precondition=False)
    norms = [np.linalg.norm(game.params.flat())]
    for _ in range(steps):
        norms.append(np.linalg.norm(go.consensus_step(game, None, cfg).x))
    return np.array(norms)

plain = run(0.0)
consensus = run(1.0)
for k in range(0, 61, 10):
    print(f"step {k:3d}   gamma=0: {plain[k]:.4f}   gamma=1: {consensus[k]:.6f}")

# %%
print("squared-norm factor per step, gamma=0:", (plain[1:] / plain[:-1])[:3] ** 2, "expected", 1 + alpha ** 2)
print("squared-norm factor per step, gamma=1:", (consensus[1:] / consensus[:-1])[:3] ** 2,
      "expected", (1 - alpha) ** 2 + alpha ** 2)

# %% [markdown]
# With RMSProp scaling switched back on the contraction is no longer a
# constant factor, but the gamma > 0 run still heads to the origin.

# %%
for gamma in (0.0, 0.33, 1.0):
    game = go.BilinearGame(1.0, 1.0)
    cfg = go.OptimizerConfig(alpha=alpha, gamma=gamma)
    for _ in range(300):
        x = go.consensus_step(game, None, cfg).x
    print(f"gamma={gamma:.2f}: |x| after 300 preconditioned steps = {np.linalg.norm(x):.4g}")
