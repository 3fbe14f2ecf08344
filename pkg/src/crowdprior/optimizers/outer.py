"""Alternating outer loop: refresh prior targets from the previous round, then
solve every agent independently against those frozen targets."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..energy import EnergyParams, Priors, PriorTargets, compute_targets, total_energy
from ..geometry import Scenario
from .direct import DirectConfig, direct_solve
from .mpa import MpaConfig, mpa_solve
from .uks import UksConfig, uks_solve

OPTIMIZERS = ("mpa", "uks", "direct")


@dataclass
class RoundRecord:
    round: int
    energy_before: float    # previous iterate under this round's targets
    energy_after: float
    max_change: float
    feasible: bool


@dataclass
class OptimizeResult:
    x: np.ndarray
    history: list = field(default_factory=list)
    targets: PriorTargets | None = None

    @property
    def rounds(self) -> int:
        return len(self.history)


def solve_round(optimizer: str, x_init, obs, mask, targets, params: EnergyParams,
                anchor_observed: bool = True, mpa_config=None, uks_config=None,
                direct_config=None) -> np.ndarray:
    """One inner solve with frozen targets."""
    if optimizer == "mpa":
        cfg = mpa_config or MpaConfig(anchor_observed=anchor_observed)
        return mpa_solve(x_init, obs, mask, targets, params, cfg).x
    if optimizer == "uks":
        return uks_solve(x_init, obs, mask, targets, params, uks_config or UksConfig()).x
    if optimizer == "direct":
        cfg = direct_config or DirectConfig(anchor_observed=anchor_observed)
        return direct_solve(x_init, obs, mask, targets, params, cfg).x
    raise ValueError(f"unknown optimizer {optimizer!r}; choose from {OPTIMIZERS}")


def alternate_optimize(x_init, obs, mask, priors: Priors, scenario: Scenario,
                       params: EnergyParams, optimizer: str = "mpa", outer_iters: int = 5,
                       tol: float = 1e-3, anchor_observed: bool = True, mpa_config=None,
                       uks_config=None, direct_config=None) -> OptimizeResult:
    """Run up to ``outer_iters`` rounds for all agents of one scene.

    Each round builds NN observations from the previous round's multi-agent
    state and GP queries from the observed/interpolated positions, then
    solves every agent from ``x_init`` against those frozen targets.  The
    loop stops early once no point moves by more than ``tol`` (``tol=0``
    forces every round).

    Parameters
    ----------
    x_init : (N, T+1, 2) linear-interpolation initialisation
    obs : (N, T+1, 2) observations, NaN on masked frames
    mask : (N, T+1) 0/1 observation mask
    """
    if optimizer not in OPTIMIZERS:
        raise ValueError(f"unknown optimizer {optimizer!r}; choose from {OPTIMIZERS}")
    if outer_iters < 1:
        raise ValueError("outer_iters must be at least 1")
    x0 = np.asarray(x_init, float)
    obs = np.asarray(obs, float)
    mask = np.asarray(mask)
    x = x0.copy()
    result = OptimizeResult(x)
    for r in range(outer_iters):
        targets = compute_targets(params.prior_kind, priors, x, x0, scenario, params)
        before = total_energy(x, obs, mask, targets, params).value
        x_new = solve_round(optimizer, x0, obs, mask, targets, params, anchor_observed,
                            mpa_config, uks_config, direct_config)
        after = total_energy(x_new, obs, mask, targets, params)
        change = float(np.max(np.abs(x_new - x))) if x.size else 0.0
        result.history.append(RoundRecord(r + 1, before, after.value, change, after.feasible))
        x = x_new
        result.targets = targets
        if r > 0 and change < tol:
            break
    result.x = x
    return result
