# %% [markdown]
# # Tracking a predator-prey state with a sampling policy as proposal
#
# The filter needs only a policy with ``sample(histories, rng)``.  The exact
# integrator gives a reference run; a trained generator checkpoint (from
# ``gantrack train``) can be supplied through GANTRACK_CHECKPOINT.

# %%
import os

import numpy as np

from gantrack import evalsuite as ev
from gantrack import lvsys, mixtracker as mt, nets

cfg = lvsys.LVConfig(3.6, 4.1, 4.4, 3.3, 1.8, 2.3)
traj = lvsys.case_trajectory(cfg)
model = mt.MeasurementModel.isotropic(0.05)
rng = np.random.default_rng(0)
case = mt.make_case(traj.states, cfg.T_h, model, rng)
print("measurement RMSE:", ev.rmse(case.measurements, case.truth))

# %% [markdown]
# Reference: the integrator as proposal plus a little jitter in the starting window.

# %%
res = mt.track(ev.LVOraclePolicy(cfg), case.history, case.measurements, mt.TrackConfig(100), rng, model)
print("oracle proposal tracking RMSE:", res.rmse(case.truth))

# %% [markdown]
# Two mixture components started from shifted windows.  The component whose
# particles explain the measurements takes over the mixture weight.

# %%
windows = [case.history, case.history + 0.3]
res2 = mt.track(ev.LVOraclePolicy(cfg), windows, case.measurements, mt.TrackConfig(100), rng, model)
for k in (0, 1, 2, 5, 10, 39):
    print(f"step {k:2d}  pi = {np.round(res2.pi[k], 4)}")

# %%
path = os.environ.get("GANTRACK_CHECKPOINT")
if path:
    policy = nets.load_checkpoint(path).policy()
    res3 = mt.track(policy, case.history, case.measurements, mt.TrackConfig(100), np.random.default_rng(1), model)
    print("generator tracking RMSE:", res3.rmse(case.truth),
          "open loop:", mt.open_loop_rmse(policy, case, np.random.default_rng(2)),
          "steps inside 3-sigma band:", int(res3.within_band().sum()), "/", len(case.truth))
