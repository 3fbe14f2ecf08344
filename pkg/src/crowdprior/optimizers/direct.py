"""Direct batch minimisation with L-BFGS and a speed-cap projection.

Only the free frames (masked ones, or every interior frame when observed
frames are not anchored) are variables.  After each Armijo line search the
iterate is projected onto the per-step speed cap by cyclic projections that
never move fixed frames.
"""
from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass

import numpy as np

from ..energy import EnergyParams, PriorTargets


@dataclass
class DirectConfig:
    max_iters: int = 500
    gtol: float = 1e-6
    memory: int = 10
    anchor_observed: bool = True
    projection_sweeps: int = 50


@dataclass
class DirectResult:
    x: np.ndarray
    iterations: np.ndarray
    warning: np.ndarray     # True where the line search failed or the budget ran out


def _energy_grad(x, o, w_trk, lam, F, c_kn):
    """Tracker + kinetic + prior (position form) and its gradient for one agent."""
    r = x - o
    e = np.sum(w_trk[:, None] * r * r)
    g = 2.0 * w_trk[:, None] * r
    d = np.diff(x, axis=0)
    rp = d - F
    e += c_kn * np.sum(d * d) + np.sum(lam * rp * rp)
    gs = 2.0 * c_kn * d + 2.0 * lam * rp
    g[1:] += gs
    g[:-1] -= gs
    return e, g


def project_speed(x, fixed, cap, sweeps=50):
    """Cyclic projection of consecutive pairs onto ``||x_t - x_{t-1}|| <= cap``."""
    steps = np.linalg.norm(np.diff(x, axis=0), axis=1)
    if np.all(steps <= cap * (1.0 + 1e-12)):
        return x
    x = x.copy()
    for _ in range(sweeps):
        moved = False
        for t in range(1, len(x)):
            d = x[t] - x[t - 1]
            dist = np.hypot(d[0], d[1])
            if dist <= cap * (1.0 + 1e-12):
                continue
            fa, fb = fixed[t - 1], fixed[t]
            if fa and fb:
                continue
            excess = (dist - cap) * d / dist
            if fa:
                x[t] -= excess
            elif fb:
                x[t - 1] += excess
            else:
                x[t - 1] += 0.5 * excess
                x[t] -= 0.5 * excess
            moved = True
        if not moved:
            break
    return x


def _lbfgs_agent(x0, o, w_trk, lam, F, free, params, cfg):
    fixed = ~free
    x = project_speed(x0, fixed, params.c_mv * params.dt, cfg.projection_sweeps)
    e, g = _energy_grad(x, o, w_trk, lam, F, params.c_kn)
    g[fixed] = 0.0
    hist = deque(maxlen=cfg.memory)
    best = (e, x)
    it = 0
    warn = False
    while it < cfg.max_iters:
        if np.max(np.abs(g)) < cfg.gtol:
            break
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(hist):
            a = rho * np.sum(s * q)
            alphas.append(a)
            q -= a * y
        if hist:
            s, y, _ = hist[-1]
            q *= np.sum(s * y) / np.sum(y * y)
        else:
            q /= max(np.max(np.abs(g)), 1.0)
        for (s, y, rho), a in zip(hist, reversed(alphas)):
            b = rho * np.sum(y * q)
            q += s * (a - b)
        p = -q
        slope = np.sum(g * p)
        if slope >= 0:
            hist.clear()
            p = -g
            slope = -np.sum(g * g)
        step = 1.0
        accepted = False
        for _ in range(40):
            xn = x + step * p
            en, gn = _energy_grad(xn, o, w_trk, lam, F, params.c_kn)
            if en <= e + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            warn = True
            break
        xp = project_speed(xn, fixed, params.c_mv * params.dt, cfg.projection_sweeps)
        if xp is not xn:
            xn = xp
            en, gn = _energy_grad(xn, o, w_trk, lam, F, params.c_kn)
        gn[fixed] = 0.0
        s = xn - x
        y = gn - g
        sy = np.sum(s * y)
        if sy > 1e-12 * np.sqrt(np.sum(s * s) * np.sum(y * y)):
            hist.append((s, y, 1.0 / sy))
        x, e, g = xn, en, gn
        it += 1
        if e < best[0]:
            best = (e, x)
    else:
        warn = np.max(np.abs(g)) >= cfg.gtol
    return best[1], it, warn


def direct_solve(x_init, obs, mask, targets: PriorTargets | None, params: EnergyParams,
                 config: DirectConfig | None = None) -> DirectResult:
    """Minimise the per-agent objective over free frames for every agent."""
    cfg = config or DirectConfig()
    single = np.ndim(x_init) == 2
    xs = np.array(x_init, float, ndmin=3)
    u = np.array(mask, float, ndmin=2)
    o = np.nan_to_num(np.array(obs, float, ndmin=3))
    n, f, _ = xs.shape
    if targets is not None:
        lam = np.array(targets.position_weight(params.dt), ndmin=3)
        F = params.dt * np.array(targets.mean, ndmin=3)
    else:
        lam = np.zeros((n, f - 1, 2))
        F = np.zeros((n, f - 1, 2))
    fixed = np.zeros((n, f), bool)
    fixed[:, 0] = fixed[:, -1] = True
    if cfg.anchor_observed:
        fixed |= u > 0
    xs[fixed] = o[fixed]
    w_trk = np.where(fixed, 0.0, u)
    out = np.empty_like(xs)
    iters = np.zeros(n, int)
    warn = np.zeros(n, bool)
    for i in range(n):
        out[i], iters[i], warn[i] = _lbfgs_agent(xs[i], o[i], w_trk[i], lam[i], F[i],
                                                 ~fixed[i], params, cfg)
    if warn.any():
        warnings.warn(f"direct solve stopped early for {int(warn.sum())} agent(s)",
                      RuntimeWarning, stacklevel=2)
    if single:
        return DirectResult(out[0], iters[0], warn[0])
    return DirectResult(out, iters, warn)
