"""Unary energy terms and the per-agent objective.

Trajectories are handled as position arrays of shape ``(T+1, 2)`` or, for
several agents at once, ``(N, T+1, 2)``; every term sums over all leading
axes so multi-agent totals are simply sums of single-agent totals.

The prior term is stored as frozen per-step *targets*: a velocity ``mean`` and
an inverse-variance ``weight`` for each step ``t -> t+1`` and component, plus a
constant ``offset``.  Then

    E_prior = sum_t  w_t * ||v_t - m_t||^2 + offset_t,   v_t = (x_{t+1} - x_t) / dt

which is the velocity form.  Multiplying through by ``dt^2`` gives the
position form ``sum_t (w_t / dt^2) ||x_{t+1} - x_t - dt * m_t||^2``, the
shape the closed-form optimizer updates work with.  For the NN prior
``w = 1 / sigma_nn^2 = lam * dt^2``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import Scenario
from .nn import MlpPrior, build_observations, stack_features

PRIOR_KINDS = ("gp", "nn", "lincomb", "gp-fed-nn")


@dataclass(frozen=True)
class EnergyParams:
    """Weights shared by every energy term and optimizer.

    ``lam`` is the position-form weight of the NN prior, ``1 / (sigma_nn^2 dt^2)``.
    """

    c_kn: float = 1.0
    c_mv: float = 2.6
    dt: float = 1.5
    lam: float = 108.0
    rho: float = 1.0
    prior_kind: str = "gp"

    def __post_init__(self):
        for name in ("c_kn", "c_mv", "dt", "lam", "rho"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.prior_kind not in PRIOR_KINDS:
            raise ValueError(f"prior_kind must be one of {PRIOR_KINDS}")

    @classmethod
    def from_sigma_nn(cls, sigma_nn: float, dt: float = 1.5, **kw) -> "EnergyParams":
        if not sigma_nn > 0:
            raise ValueError("sigma_nn must be positive")
        return cls(dt=dt, lam=1.0 / (sigma_nn ** 2 * dt ** 2), **kw)

    @property
    def sigma_nn(self) -> float:
        return 1.0 / (np.sqrt(self.lam) * self.dt)

    def with_(self, **kw) -> "EnergyParams":
        return replace(self, **kw)


@dataclass
class PriorTargets:
    """Frozen prior targets for one or many agents.

    ``mean`` and ``weight`` have shape ``(..., T, 2)``; ``offset`` has shape
    ``(..., T)`` and carries the constant left over when two priors are merged.
    """

    mean: np.ndarray
    weight: np.ndarray
    offset: np.ndarray | None = None

    def __post_init__(self):
        self.mean = np.asarray(self.mean, float)
        self.weight = np.broadcast_to(np.asarray(self.weight, float), self.mean.shape).copy()
        if self.offset is None:
            self.offset = np.zeros(self.mean.shape[:-1])
        if np.any(self.weight < 0):
            raise ValueError("prior weights must be non-negative")

    def __getitem__(self, idx) -> "PriorTargets":
        return PriorTargets(self.mean[idx], self.weight[idx], self.offset[idx])

    def position_weight(self, dt: float) -> np.ndarray:
        return self.weight / dt ** 2

    @staticmethod
    def combine(a: "PriorTargets", b: "PriorTargets") -> "PriorTargets":
        """Merge two quadratic priors into one inverse-variance-weighted target."""
        w = a.weight + b.weight
        with np.errstate(invalid="ignore", divide="ignore"):
            m = np.where(w > 0, (a.weight * a.mean + b.weight * b.mean) / w, 0.0)
            const = np.where(w > 0, a.weight * b.weight / w, 0.0) * (a.mean - b.mean) ** 2
        return PriorTargets(m, w, a.offset + b.offset + const.sum(-1))


@dataclass
class EnergyValue:
    value: float
    feasible: bool


def _points(x):
    return np.asarray(getattr(x, "points", x), float)


def e_tracker(x, obs, mask=None) -> float:
    """``sum_t u_t ||x_t - o_t||^2``; masked observations may be NaN."""
    x = _points(x)
    if mask is None:
        mask = getattr(obs, "mask")
    o = _points(obs)
    if x.shape != o.shape:
        raise ValueError("trajectory and observation lengths differ")
    u = np.asarray(mask, float)
    d = np.where(u[..., None] > 0, x - np.nan_to_num(o), 0.0)
    return float(np.sum(u * np.sum(d * d, axis=-1)))


def e_kinetic(x, c_kn: float = 1.0) -> float:
    x = _points(x)
    return float(c_kn * np.sum(np.diff(x, axis=-2) ** 2))


def e_maxvel(x, c_mv: float = 2.6, dt: float = 1.5):
    """Feasibility of the speed cap and the indices ``t`` of violating steps ``t-1 -> t``.

    Boundary speeds equal to ``c_mv`` count as feasible; a tiny relative slack
    absorbs rounding from optimizers that project exactly onto the cap.
    """
    x = _points(x)
    step = np.linalg.norm(np.diff(x, axis=-2), axis=-1)
    bad = step > c_mv * dt * (1.0 + 1e-12)
    idx = np.argwhere(bad)
    idx[..., -1] += 1
    viol = [tuple(int(v) for v in r) if len(r) > 1 else int(r[0]) for r in idx]
    return (not bad.any()), viol


def e_prior(x, targets: PriorTargets, dt: float) -> float:
    """Velocity-form prior energy ``sum_t w_t ||v_t - m_t||^2 + offset``."""
    v = np.diff(_points(x), axis=-2) / dt
    r = v - targets.mean
    return float(np.sum(targets.weight * r * r) + np.sum(targets.offset))


def e_prior_position(x, targets: PriorTargets, dt: float) -> float:
    """Position form ``sum_t (w_t/dt^2) ||x_{t+1} - x_t - dt m_t||^2 + offset``."""
    r = np.diff(_points(x), axis=-2) - dt * targets.mean
    return float(np.sum(targets.position_weight(dt) * r * r) + np.sum(targets.offset))


def total_energy(x, obs, mask, targets: PriorTargets | None, params: EnergyParams) -> EnergyValue:
    value = e_tracker(x, obs, mask) + e_kinetic(x, params.c_kn)
    if targets is not None:
        value += e_prior(x, targets, params.dt)
    feasible, _ = e_maxvel(x, params.c_mv, params.dt)
    return EnergyValue(value, feasible)


# --------------------------------------------------------------------------
# prior targets from fitted models

@dataclass
class Priors:
    gp: object | None = None          # GpFlowModel
    nn: MlpPrior | None = None        # plain NN
    gp_fed_nn: MlpPrior | None = None  # NN with GP input branches

    def require(self, kind: str):
        need = {"gp": ["gp"], "nn": ["nn"], "lincomb": ["gp", "nn"],
                "gp-fed-nn": ["gp", "gp_fed_nn"]}[kind]
        missing = [n for n in need if getattr(self, n) is None]
        if missing:
            raise ValueError(f"prior {kind!r} needs model(s): {', '.join(missing)}")


def gp_targets(gp, anchor_points, dt: float) -> PriorTargets:
    """GP velocity mean and inverse predictive variance for every step.

    ``anchor_points`` ``(N, T+1, 2)`` are the query locations; step ``t -> t+1``
    is queried at frame ``t`` and time ``t * dt``.
    """
    pts = np.asarray(anchor_points, float)
    n, f, _ = pts.shape
    t = np.broadcast_to(np.arange(f - 1) * dt, (n, f - 1))
    q = np.concatenate([pts[:, :-1].reshape(-1, 2), t.reshape(-1, 1)], axis=1)
    mean, std = gp.predict(q, include_noise=True)
    return PriorTargets(mean.reshape(n, f - 1, 2), 1.0 / std.reshape(n, f - 1, 2) ** 2)


def nn_velocities(model: MlpPrior, world, scenario: Scenario, dt: float,
                  gp=None, desired_speed: float = 1.3) -> np.ndarray:
    """NN-predicted velocity for each step ``t -> t+1`` of every agent.

    Observations at frame ``t`` use the positions of all agents in ``world``
    ``(N, T+1, 2)``; the current velocity is ``(x_t - x_{t-1}) / dt`` (zero at
    ``t = 0``).
    """
    x = np.asarray(world, float)
    n, f, _ = x.shape
    out = np.zeros((n, f - 1, 2))
    goals = scenario.goals[:n]
    for t in range(f - 1):
        prev = x[:, t - 1] if t > 0 else x[:, 0]
        obs = build_observations(x[:, t], prev, scenario, goals, dt, desired_speed,
                                 gp=gp, time=t * dt)
        cur = (x[:, t] - prev) / dt
        out[:, t] = model.forward(stack_features(obs, cur))
    return out


def compute_targets(kind: str, priors: Priors, world, anchor_points, scenario: Scenario,
                    params: EnergyParams) -> PriorTargets:
    """Frozen targets for one outer round.

    ``world`` is the previous-round multi-agent state (NN observations);
    ``anchor_points`` are the observation-based locations queried by the GP.
    """
    priors.require(kind)
    n, f, _ = np.shape(world)
    w_nn = params.lam * params.dt ** 2
    if kind == "gp":
        return gp_targets(priors.gp, anchor_points, params.dt)
    if kind == "nn":
        v = nn_velocities(priors.nn, world, scenario, params.dt)
        return PriorTargets(v, w_nn)
    if kind == "gp-fed-nn":
        v = nn_velocities(priors.gp_fed_nn, world, scenario, params.dt, gp=priors.gp)
        return PriorTargets(v, w_nn)
    gp_part = gp_targets(priors.gp, anchor_points, params.dt)
    nn_part = PriorTargets(nn_velocities(priors.nn, world, scenario, params.dt), w_nn)
    return PriorTargets.combine(gp_part, nn_part)
