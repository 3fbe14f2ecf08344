"""Unscented Kalman smoother over the per-agent dynamical-system surrogate.

Kinetic plus prior energy for one step, ``C ||dx||^2 + lam ||dx - dt m||^2``,
is minimised by ``dx = dt * lam/(lam + C) * m`` with Gaussian residual
covariance ``1/(2(C + lam)) I``.  That gives the transition; the tracker term
becomes the measurement ``o_t = x_t + r_t`` whose noise is small on observed
frames and large on masked ones.  A forward unscented filter followed by an
unscented Rauch-Tung-Striebel pass returns the smoothed means.

Velocities go through a per-component soft limiter
``f(v) = 2 C_mv (s(v) - 1/2)``, Taylor-expanded around the predicted velocity.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..energy import EnergyParams, PriorTargets


class CovarianceError(RuntimeError):
    pass


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(v, float)))


def soft_limiter(v, c_mv: float = 2.6, a=None):
    """First-order expansion of ``2 c_mv (s(v) - 1/2)`` around ``a``.

    Returns ``(value, slope)``; ``a`` defaults to ``v`` (exact evaluation).
    """
    v = np.asarray(v, float)
    a = v if a is None else np.asarray(a, float)
    s = _sigmoid(a)
    slope = 2.0 * c_mv * s * (1.0 - s)
    return 2.0 * c_mv * (s - 0.5) + slope * (v - a), slope


@dataclass
class UksConfig:
    alpha: float = 1e-3
    beta: float = 2.0
    kappa: float = 0.0
    obs_noise_small: float = 1e-4
    obs_noise_large: float = 1e2
    init_var: float = 1e-4
    use_limiter: bool = True
    pin_endpoints: bool = True


@dataclass
class UksResult:
    x: np.ndarray
    filtered_mean: np.ndarray
    filtered_cov: np.ndarray
    smoothed_cov: np.ndarray


def uks_transition(x_t, prior_velocity, params: EnergyParams, lam=None, cov=None,
                   use_limiter: bool = True):
    """Predicted mean and covariance one step ahead.

    ``lam`` is the position-form prior weight (scalar or per component),
    defaulting to ``params.lam``.
    """
    lam = params.lam if lam is None else np.asarray(lam, float)
    shrink = lam / (lam + params.c_kn)
    m = np.asarray(prior_velocity, float)
    v = soft_limiter(m, params.c_mv)[0] if use_limiter else m
    mean = np.asarray(x_t, float) + params.dt * shrink * v
    q = np.broadcast_to(1.0 / (2.0 * (params.c_kn + lam)), mean.shape)
    qmat = q[..., :, None] * np.eye(2)
    cov = qmat if cov is None else np.asarray(cov, float) + qmat
    return mean, cov


def _weights(n, alpha, beta, kappa):
    lam = alpha ** 2 * (n + kappa) - n
    wm = np.full(2 * n + 1, 1.0 / (2 * (n + lam)))
    wc = wm.copy()
    wm[0] = lam / (n + lam)
    wc[0] = wm[0] + 1.0 - alpha ** 2 + beta
    return wm, wc, n + lam


def _chol(p):
    p = 0.5 * (p + np.swapaxes(p, -1, -2))
    for jitter in (0.0, 1e-12, 1e-9, 1e-6):
        try:
            return np.linalg.cholesky(p + jitter * np.eye(p.shape[-1]))
        except np.linalg.LinAlgError:
            continue
    raise CovarianceError("covariance lost positive definiteness")


def _sigma_points(mean, cov, scale):
    s = _chol(cov) * np.sqrt(scale)                   # (N, 2, 2), columns are offsets
    offs = np.swapaxes(s, -1, -2)                     # (N, 2, 2) rows
    return np.concatenate([mean[:, None], mean[:, None] + offs, mean[:, None] - offs], axis=1)


def _moments(pts, wm, wc):
    # weights are of order 1/alpha^2; work relative to the central point
    # to avoid cancellation (the weights sum to one)
    rel = pts - pts[:, :1]
    mean = pts[:, 0] + np.einsum("k,nkd->nd", wm, rel)
    d = pts - mean[:, None]
    cov = np.einsum("k,nki,nkj->nij", wc, d, d)
    return mean, d, cov


def uks_solve(x_init, obs, mask, targets: PriorTargets, params: EnergyParams,
              config: UksConfig | None = None) -> UksResult:
    """Smooth every agent's trajectory.

    ``x_init`` supplies the pseudo-measurements on masked frames (normally the
    linear interpolation); observed frames use ``obs``.
    """
    cfg = config or UksConfig()
    single = np.ndim(x_init) == 2
    xi = np.array(x_init, float, ndmin=3)
    u = np.array(mask, float, ndmin=2)
    o = np.where(u[..., None] > 0, np.nan_to_num(np.array(obs, float, ndmin=3)), xi)
    n, f, _ = xi.shape
    lam_p = np.array(targets.position_weight(params.dt), ndmin=3)
    vel = np.array(targets.mean, ndmin=3)
    wm, wc, scale = _weights(2, cfg.alpha, cfg.beta, cfg.kappa)
    eye = np.eye(2)
    r_var = np.where(u > 0, cfg.obs_noise_small, cfg.obs_noise_large)

    fm = np.zeros((n, f, 2))
    fc = np.zeros((n, f, 2, 2))
    pm = np.zeros((n, f, 2))        # one-step predictions
    pc = np.zeros((n, f, 2, 2))
    cross = np.zeros((n, f, 2, 2))  # cov(x_t, x_{t+1}) under the filter at t

    mean = o[:, 0].copy()
    cov = np.broadcast_to(cfg.init_var * eye, (n, 2, 2)).copy()
    for t in range(f):
        if t > 0:
            pts = _sigma_points(mean, cov, scale)
            lam_t = lam_p[:, t - 1]
            shift, q = uks_transition(np.zeros((n, 2)), vel[:, t - 1], params, lam_t,
                                      use_limiter=cfg.use_limiter)
            prop = pts + shift[:, None]
            mean_p, dprop, cov_p = _moments(prop, wm, wc)
            cov_p = cov_p + q
            _, dpts, _ = _moments(pts, wm, wc)
            cross[:, t - 1] = np.einsum("k,nki,nkj->nij", wc, dpts, dprop)
            pm[:, t], pc[:, t] = mean_p, cov_p
            mean, cov = mean_p, cov_p
        # measurement H(x) = x
        pts = _sigma_points(mean, cov, scale)
        zm, dz, s = _moments(pts, wm, wc)
        s = s + r_var[:, t, None, None] * eye
        _, dx, _ = _moments(pts, wm, wc)
        pxz = np.einsum("k,nki,nkj->nij", wc, dx, dz)
        gain = np.linalg.solve(s, np.swapaxes(pxz, -1, -2))
        gain = np.swapaxes(gain, -1, -2)
        mean = mean + np.einsum("nij,nj->ni", gain, o[:, t] - zm)
        cov = cov - gain @ s @ np.swapaxes(gain, -1, -2)
        cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
        _chol(cov)
        fm[:, t], fc[:, t] = mean, cov

    sm = fm.copy()
    sc = fc.copy()
    for t in range(f - 2, -1, -1):
        g = np.swapaxes(np.linalg.solve(pc[:, t + 1], np.swapaxes(cross[:, t], -1, -2)), -1, -2)
        sm[:, t] = fm[:, t] + np.einsum("nij,nj->ni", g, sm[:, t + 1] - pm[:, t + 1])
        c = fc[:, t] + g @ (sc[:, t + 1] - pc[:, t + 1]) @ np.swapaxes(g, -1, -2)
        sc[:, t] = 0.5 * (c + np.swapaxes(c, -1, -2))
    x = sm.copy()
    if cfg.pin_endpoints:
        x[:, 0] = o[:, 0]
        x[:, -1] = o[:, -1]
    if not np.all(np.isfinite(x)):
        raise CovarianceError("non-finite smoothed state")
    if single:
        return UksResult(x[0], fm[0], fc[0], sc[0])
    return UksResult(x, fm, fc, sc)
