"""Message passing (consensus ADMM) over minimizer and equality nodes.

Each energy term contributes minimizer nodes holding local copies of the one
or two positions they touch.  A node receives a message ``n = z - u`` (the
consensus value minus its scaled dual) and returns the proximal point

    argmin_x  f(x) + rho/2 ||x - n||^2

in closed form.  Equality nodes average ``x + u`` over incident edges, then
the duals advance by ``x - z``.  With a fixed ``rho`` this is standard ADMM.

All agents are solved together as ``(N, T+1, 2)`` arrays; convergence is
tracked per agent and converged agents are frozen, so a batch gives the same
result as solving agents one by one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..energy import EnergyParams, PriorTargets


class DivergenceError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# closed-form node updates

def mpa_min_tracker(n_t, o_t, u_t, rho):
    """argmin_x u ||x - o||^2 + rho/2 ||x - n||^2."""
    n_t = np.asarray(n_t, float)
    u = np.asarray(u_t, float)[..., None] if np.ndim(u_t) else float(u_t)
    o = np.nan_to_num(np.asarray(o_t, float))
    return (2.0 * u * o + rho * n_t) / (2.0 * u + rho)


def mpa_min_prior(n_prev, n_next, F, lam, rho):
    """Stationary point of ``lam ||x_t - x_{t-1} - F||^2`` plus the two
    ``rho/2`` proximity terms.

    The pair keeps its message midpoint and its separation becomes
    ``(4 lam F + rho (n_t - n_{t-1})) / (4 lam + rho)``.  ``lam`` may be a
    scalar or broadcast per component.
    """
    n_prev = np.asarray(n_prev, float)
    n_next = np.asarray(n_next, float)
    lam = np.asarray(lam, float)
    den = 4.0 * lam + rho
    x_prev = ((2 * lam + rho) * n_prev + 2 * lam * n_next - 2 * lam * F) / den
    x_next = ((2 * lam + rho) * n_next + 2 * lam * n_prev + 2 * lam * F) / den
    return x_prev, x_next


def mpa_min_kinetic(n_prev, n_next, c_kn, rho):
    """Closed form for ``c_kn ||x_t - x_{t-1}||^2`` (the prior update with F = 0)."""
    return mpa_min_prior(n_prev, n_next, 0.0, c_kn, rho)


def mpa_min_maxvel(n_prev, n_next, c_mv, dt, rho=1.0):
    """Project the pair onto ``||x_t - x_{t-1}|| <= c_mv dt`` keeping the midpoint."""
    n_prev = np.asarray(n_prev, float)
    n_next = np.asarray(n_next, float)
    d = n_next - n_prev
    dist = np.linalg.norm(d, axis=-1, keepdims=True)
    cap = c_mv * dt
    with np.errstate(invalid="ignore", divide="ignore"):
        shrink = np.where(dist > cap, 0.5 * (1.0 - cap / dist), 0.0)
    return n_prev + shrink * d, n_next - shrink * d


def mpa_min_pair(n_a, n_b, r_sum):
    """Push two positions apart symmetrically to at least ``r_sum``."""
    d = np.asarray(n_a, float) - np.asarray(n_b, float)
    dist = np.linalg.norm(d, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        push = np.where(dist < r_sum, 0.5 * (r_sum / np.maximum(dist, 1e-12) - 1.0), 0.0)
    # coincident points: separate along +x
    d = np.where(dist > 1e-12, d, np.array([1e-12, 0.0]))
    return n_a + push * d, n_b - push * d


# --------------------------------------------------------------------------
# solver

@dataclass
class MpaConfig:
    max_iters: int = 10000
    tol: float = 1e-6
    rho: float | None = None           # None: take EnergyParams.rho
    anchor_observed: bool = True
    pairwise_mode: bool = False
    radii: np.ndarray | None = None    # needed for pairwise_mode


@dataclass
class MpaResult:
    x: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray


def mpa_solve(x_init, obs, mask, targets: PriorTargets | None, params: EnergyParams,
              config: MpaConfig | None = None) -> MpaResult:
    """Minimise tracker + kinetic + prior under the speed cap for every agent.

    Parameters
    ----------
    x_init : (N, T+1, 2) or (T+1, 2) initial positions (linear interpolation)
    obs, mask : observations (NaN where masked) and 0/1 mask of the same leading shape
    targets : frozen prior targets, or None for no prior term

    Iteration stops per agent once neither the consensus positions nor the
    primal residuals of nodes touching a free frame move by more than ``tol``.
    """
    cfg = config or MpaConfig()
    single = np.ndim(x_init) == 2
    z = np.array(x_init, float, ndmin=3)
    o = np.nan_to_num(np.array(obs, float, ndmin=3))
    u = np.array(mask, float, ndmin=2)
    n, f, _ = z.shape
    rho = params.rho if cfg.rho is None else cfg.rho
    if targets is not None:
        lam_p = np.array(targets.position_weight(params.dt), ndmin=3)
        F = params.dt * np.array(targets.mean, ndmin=3)
        has_prior = bool(np.any(lam_p > 0))
    else:
        lam_p = np.zeros((n, f - 1, 2))
        F = np.zeros((n, f - 1, 2))
        has_prior = False

    fixed = np.zeros((n, f), bool)
    fixed[:, 0] = fixed[:, -1] = True
    if cfg.anchor_observed:
        fixed |= u > 0
    z[fixed] = o[fixed]

    pairs = None
    if cfg.pairwise_mode and n > 1:
        if cfg.radii is None:
            raise ValueError("pairwise_mode needs per-agent radii")
        ia, ib = np.triu_indices(n, 1)
        radii = np.asarray(cfg.radii, float)
        pairs = (ia, ib, (radii[ia] + radii[ib])[:, None, None])
        iters, conv = _admm(z, o, u, fixed, lam_p, F, has_prior, params, rho, cfg, pairs)
    else:
        # nodes between two fixed frames never move a free one, so each agent
        # is cropped to a common-length window around its free frames
        free = ~fixed
        has_free = free.any(axis=1)
        iters = np.zeros(n, int)
        conv = np.ones(n, bool)
        if has_free.any():
            rows = np.flatnonzero(has_free)
            first = np.argmax(free[rows], axis=1) - 1
            last = f - np.argmax(free[rows, ::-1], axis=1)
            width = int(np.max(last - first + 1))
            start = np.clip(first, 0, f - width)
            fr = start[:, None] + np.arange(width)
            st = start[:, None] + np.arange(width - 1)
            r = rows[:, None]
            zw = z[r, fr]
            it_w, conv_w = _admm(zw, o[r, fr], u[r, fr], fixed[r, fr], lam_p[r, st],
                                 F[r, st], has_prior, params, rho, cfg, None)
            z[r, fr] = zw
            iters[rows] = it_w
            conv[rows] = conv_w
    x = z[0] if single else z
    return MpaResult(x, iters[0] if single else iters, conv[0] if single else conv)


def _admm(z, o, u, fixed, lam_p, F, has_prior, params, rho, cfg, pairs):
    """Run ADMM in place on ``z``; returns per-agent iteration counts and convergence."""
    n, f, _ = z.shape
    trk_active = (u > 0) & ~fixed
    # steps with at least one free end decide convergence
    live = ~(fixed[:, :-1] & fixed[:, 1:])

    deg = np.zeros((n, f))
    k = 3 if has_prior else 2
    deg[:, :-1] += k
    deg[:, 1:] += k
    deg += trk_active
    if pairs is not None:
        deg += n - 1
    deg = deg[..., None]

    u_trk = np.zeros((n, f, 2))
    u_kin = np.zeros((n, f - 1, 2, 2))
    u_pri = np.zeros((n, f - 1, 2, 2))
    u_mv = np.zeros((n, f - 1, 2, 2))
    u_pair = np.zeros((len(pairs[0]), f, 2, 2)) if pairs is not None else None

    active = np.ones(n, bool)
    iters = np.zeros(n, int)
    for it in range(cfg.max_iters):
        idx = np.flatnonzero(active) if pairs is None else np.arange(n)
        if len(idx) == 0:
            break
        zi = z[idx]
        acc = np.zeros_like(zi)

        def pair_node(udual, fn):
            xa, xb = fn(zi[:, :-1] - udual[:, :, 0], zi[:, 1:] - udual[:, :, 1])
            return np.stack([xa, xb], axis=2)

        xk = pair_node(u_kin[idx], lambda a, b: mpa_min_kinetic(a, b, params.c_kn, rho))
        xm = pair_node(u_mv[idx], lambda a, b: mpa_min_maxvel(a, b, params.c_mv, params.dt, rho))
        local = [(xk, u_kin), (xm, u_mv)]
        if has_prior:
            lp, Fi = lam_p[idx], F[idx]
            local.append((pair_node(u_pri[idx], lambda a, b: mpa_min_prior(a, b, Fi, lp, rho)),
                          u_pri))
        for xl, ud in local:
            s = xl + ud[idx]
            acc[:, :-1] += s[:, :, 0]
            acc[:, 1:] += s[:, :, 1]
        ta = trk_active[idx]
        if ta.any():
            xt = mpa_min_tracker(zi - u_trk[idx], o[idx], u[idx], rho)
            acc += np.where(ta[..., None], xt + u_trk[idx], 0.0)
        if pairs is not None:
            ia, ib, rs = pairs
            xa, xb = mpa_min_pair(z[ia] - u_pair[:, :, 0], z[ib] - u_pair[:, :, 1], rs)
            np.add.at(acc, ia, xa + u_pair[:, :, 0])
            np.add.at(acc, ib, xb + u_pair[:, :, 1])

        z_new = acc / deg[idx]
        fi = fixed[idx]
        z_new[fi] = zi[fi]
        if not np.all(np.isfinite(z_new)):
            raise DivergenceError(f"non-finite message at iteration {it}")

        # dual updates; primal residuals of live steps feed the stopping test
        resid = np.zeros(len(idx))
        li = live[idx][..., None]
        for xl, ud in local:
            ra = xl[:, :, 0] - z_new[:, :-1]
            rb = xl[:, :, 1] - z_new[:, 1:]
            ud[idx, :, 0] += ra
            ud[idx, :, 1] += rb
            resid = np.maximum(resid, np.max(np.abs(ra) * li, axis=(1, 2)))
            resid = np.maximum(resid, np.max(np.abs(rb) * li, axis=(1, 2)))
        if ta.any():
            rt = np.where(ta[..., None], xt - z_new, 0.0)
            u_trk[idx] += rt
            resid = np.maximum(resid, np.max(np.abs(rt), axis=(1, 2)))
        if pairs is not None:
            ra = xa - z_new[ia]
            rb = xb - z_new[ib]
            u_pair[:, :, 0] += ra
            u_pair[:, :, 1] += rb
            resid = np.maximum(resid, max(np.abs(ra).max(), np.abs(rb).max()))

        change = np.maximum(np.max(np.abs(z_new - zi), axis=(1, 2)), resid)
        z[idx] = z_new
        iters[idx] += 1
        if pairs is None:
            active[idx[change < cfg.tol]] = False
        elif change.max() < cfg.tol:
            active[:] = False
            break
    return iters, ~active
