"""
Three solvers, one objective
============================

A single agent walks a gentle curve; ten frames are hidden.  With a
constant prior velocity the objective is quadratic, so the consensus ADMM
solver and the quasi-Newton solver should land on the same point, while
the Kalman smoother solves its dynamical-system surrogate.
Run with ``python3 notebooks/02_optimizers_on_one_gap.py``.
"""

# %%
import numpy as np

from crowdprior.energy import EnergyParams, PriorTargets, total_energy
from crowdprior.optimizers import (MpaConfig, direct_solve, mpa_solve, soft_limiter, uks_solve,
                                   uks_transition)

dt = 1.5
t = np.arange(30) * dt
truth = np.stack([1.1 * t, 4 * np.sin(t / 15)], axis=1)[None]
mask = np.ones((1, 30), int)
mask[0, 10:20] = 0
obs = np.where(mask[..., None] > 0, truth, np.nan)
x0 = truth.copy()
for c in range(2):
    x0[0, 10:20, c] = np.interp(np.arange(10, 20), np.flatnonzero(mask[0]), truth[0, mask[0] > 0, c])

# %%
# Targets: the true velocities with a small bias, at the default weight
# lam * dt^2 that corresponds to lam = 108.
params = EnergyParams()
vel = np.diff(truth, axis=1) / dt + 0.05
targets = PriorTargets(vel, params.lam * dt ** 2)

for name, x in (("linear", x0),
                ("mpa", mpa_solve(x0, obs, mask, targets, params).x),
                ("mpa rho=20", mpa_solve(x0, obs, mask, targets, params, MpaConfig(rho=20.0)).x),
                ("direct", direct_solve(x0, obs, mask, targets, params).x),
                ("uks", uks_solve(x0, obs, mask, targets, params).x)):
    e = total_energy(x, obs, mask, targets, params).value
    err = np.abs(x - truth)[0, 10:20].max()
    print(f"{name:11s} energy {e:10.4f}   max error on hidden frames {err:.4f} m")

# %%
# The smoother shrinks the prior step by lam / (lam + C_kn) and uses process
# variance 1 / (2 (C_kn + lam)); at lam = 108 these are 108/109 and 1/218.
mean, cov = uks_transition(np.zeros(2), np.array([1.0, 0.0]), params, use_limiter=False)
print("shrink", mean[0] / dt, "=", 108 / 109, "  Q", cov[0, 0], "=", 1 / 218)

# %%
# The soft limiter caps each velocity component smoothly at C_mv.
for v in (0.0, 1.0, 2.6, 10.0):
    value, slope = soft_limiter(v, params.c_mv)
    print(f"v={v:5.1f}  limited {value:.4f}  slope {slope:.4f}")
