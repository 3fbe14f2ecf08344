"""
Filling a hidden segment with a learned flow field
==================================================

Simulate a two-way hallway, learn a velocity field over (x, y, t) from a
handful of runs, then fill a hidden block of every agent in a held-out run.
Run with ``python3 notebooks/01_flow_prior_interpolation.py``.
"""

# %%
import time

import numpy as np

from crowdprior import gp
from crowdprior.energy import EnergyParams, Priors
from crowdprior.experiment import gp_training_data, masked_task, stack
from crowdprior.geometry import count_collisions
from crowdprior.metrics import relative_dtw
from crowdprior.optimizers import alternate_optimize
from crowdprior.scenarios import get_scenario
from crowdprior.simulator import simulate

sc = get_scenario("hallway-two-way")
runs = [stack(simulate(sc, seed=s)) for s in range(5)]
print(f"{len(sc.agents)} agents, {runs[0].shape[1]} frames per run")

# %%
# Four runs train the field; it is queried at (x, y, t) and returns a mean
# velocity plus a predictive standard deviation.
x_train, v_train = gp_training_data(runs[:4], dt=1.5)
model = gp.fit(x_train, v_train, max_points=400, optimizer_restarts=1)
mean, std = model.predict(x_train[:5], include_noise=True)
print("field at five training inputs\n", np.round(np.hstack([v_train[:5], mean, std]), 3))

# %%
# Hide 30% of each agent's frames in the held-out run and start from a
# straight-line fill.
truth, obs, mask, x0 = masked_task(simulate(sc, seed=4), 0.3, seed=4)


def score(x):
    dtw = np.nanmean([relative_dtw(x[i], truth[i]) for i in range(len(x))])
    hits = count_collisions(x, sc.radii, sc)
    return dtw, hits["agent_agent"], hits["agent_obstacle"]


print("linear fill     : DTW %.2f%%, collisions %d agent / %d obstacle" % score(x0))

# %%
# The GP prior turns the field into per-step velocity targets weighted by
# the inverse predictive variance.  Each optimizer minimises the same energy.
params = EnergyParams(prior_kind="gp")
for name in ("uks", "direct", "mpa"):
    t0 = time.perf_counter()
    res = alternate_optimize(x0, obs, mask, Priors(gp=model), sc, params, name, outer_iters=2)
    secs = time.perf_counter() - t0
    print(f"gp + {name:6s}    : DTW %.2f%%, collisions %d agent / %d obstacle" % score(res.x),
          f"({secs:.1f} s)")
