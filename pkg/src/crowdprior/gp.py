"""Gaussian-process velocity field over (x, y, t).

Two independent GPs (one per velocity component) with a Matern-5/2 ARD
kernel.  Inputs and targets are standardised before fitting, and
hyperparameters are found by multi-start L-BFGS on the log marginal
likelihood in log space.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, lapack, solve_triangular
from scipy.optimize import minimize

SQRT5 = np.sqrt(5.0)
JITTER_LADDER = (0.0, 1e-8, 1e-6, 1e-4)
LOG_BOUNDS = (np.log(1e-3), np.log(1e3))


class GPFitError(RuntimeError):
    pass


def matern52(a, b, signal_var, lengthscales):
    """Matern-5/2 ARD kernel matrix between rows of ``a`` and ``b``."""
    a = np.asarray(a, float) / lengthscales
    b = np.asarray(b, float) / lengthscales
    d2 = np.sum(a * a, 1)[:, None] + np.sum(b * b, 1)[None, :] - 2.0 * a @ b.T
    r = np.sqrt(np.maximum(d2, 0.0))
    return signal_var * (1.0 + SQRT5 * r + 5.0 / 3.0 * r * r) * np.exp(-SQRT5 * r)


def _sq_diffs(x):
    """Per-dimension squared differences, shape (d, n, n), computed exactly."""
    return np.stack([(x[:, j, None] - x[None, :, j]) ** 2 for j in range(x.shape[1])])


def _matern52_parts(sqd, lengthscales):
    """Unit-variance kernel, scaled squared differences and the common factor
    of the length-scale derivatives."""
    scaled = sqd / (lengthscales ** 2)[:, None, None]
    r = np.sqrt(scaled.sum(0))
    e = np.exp(-SQRT5 * r)
    k = (1.0 + SQRT5 * r + 5.0 / 3.0 * r * r) * e
    return k, scaled, (5.0 / 3.0) * (1.0 + SQRT5 * r) * e


def _cholesky(k):
    n = len(k)
    scale = max(float(np.mean(np.diag(k))), 1e-300)
    for jitter in JITTER_LADDER:
        try:
            return np.linalg.cholesky(k + jitter * scale * np.eye(n)), jitter
        except np.linalg.LinAlgError:
            continue
    raise GPFitError("kernel matrix is not positive definite after jitter escalation")


def log_marginal_likelihood(x, y, log_theta, with_grad=True):
    """Log marginal likelihood of one output and its gradient w.r.t. the log
    hyperparameters ``[log s2, log l_1..l_d, log noise]``.

    Raises :class:`GPFitError` when the kernel is not positive definite.
    """
    x = np.asarray(x, float)
    return _lml(_sq_diffs(x), np.asarray(y, float), np.asarray(log_theta, float), with_grad)


def _lml(sqd, y, log_theta, with_grad=True):
    d, n, _ = sqd.shape
    s2 = np.exp(log_theta[0])
    ell = np.exp(log_theta[1:1 + d])
    noise = np.exp(log_theta[1 + d])
    k_unit, scaled, dk_common = _matern52_parts(sqd, ell)
    k = s2 * k_unit
    k[np.diag_indices(n)] += noise
    try:
        chol = np.linalg.cholesky(k)
    except np.linalg.LinAlgError as exc:
        raise GPFitError("kernel matrix is not positive definite") from exc
    alpha = cho_solve((chol, True), y)
    lml = -0.5 * y @ alpha - np.sum(np.log(np.diag(chol))) - 0.5 * n * np.log(2 * np.pi)
    if not with_grad:
        return lml
    kinv, info = lapack.dpotri(chol, lower=1)
    if info != 0:
        raise GPFitError("failed to invert kernel matrix")
    kinv = np.tril(kinv) + np.tril(kinv, -1).T
    w = np.outer(alpha, alpha) - kinv
    grad = np.empty(len(log_theta))
    grad[0] = 0.5 * np.sum(w * (s2 * k_unit))
    wk = w * dk_common
    for j in range(d):
        grad[1 + j] = 0.5 * s2 * np.sum(wk * scaled[j])
    grad[1 + d] = 0.5 * noise * np.trace(w)
    return lml, grad


@dataclass
class _Output:
    log_theta: np.ndarray
    chol: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    jitter: float = 0.0

    @property
    def signal_var(self):
        return float(np.exp(self.log_theta[0]))

    @property
    def lengthscales(self):
        return np.exp(self.log_theta[1:-1])

    @property
    def noise_var(self):
        return float(np.exp(self.log_theta[-1]))


@dataclass
class GpFlowModel:
    """Fitted velocity field.  ``x_train`` is stored un-normalised."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray
    outputs: list = field(default_factory=list)

    @property
    def n_train(self) -> int:
        return len(self.x_train)

    def normalize(self, x):
        return (np.asarray(x, float) - self.x_mean) / self.x_std

    def denormalize(self, z):
        return np.asarray(z, float) * self.x_std + self.x_mean

    @property
    def hyperparameters(self) -> np.ndarray:
        """``(2, 5)`` array of log hyperparameters, one row per velocity component."""
        return np.stack([o.log_theta for o in self.outputs])

    def predict(self, query, include_noise: bool = False):
        """Posterior mean and standard deviation of the velocity at ``query``.

        ``query`` is ``(3,)`` or ``(m, 3)`` rows of ``(x, y, t)``.  The standard
        deviation is that of the latent field unless ``include_noise``.
        Returns ``(mean, std)`` with the trailing axis holding (vx, vy).
        """
        return predict(self, query, include_noise)

    def save(self, path) -> None:
        np.savez(
            path,
            format=np.array("crowdprior-gp-v1"),
            x_train=self.x_train, y_train=self.y_train,
            x_mean=self.x_mean, x_std=self.x_std, y_mean=self.y_mean, y_std=self.y_std,
            log_theta=self.hyperparameters,
            jitter=np.array([o.jitter for o in self.outputs]),
        )

    @classmethod
    def load(cls, path) -> "GpFlowModel":
        with np.load(path, allow_pickle=False) as z:
            if str(z["format"]) != "crowdprior-gp-v1":
                raise ValueError(f"{path}: not a GP model file")
            model = cls(z["x_train"], z["y_train"], z["x_mean"], z["x_std"],
                        z["y_mean"], z["y_std"])
            model.outputs = [_factorize(model, c, z["log_theta"][c], float(z["jitter"][c]))
                             for c in range(2)]
        return model


def _safe_std(v):
    s = np.std(v, axis=0)
    return np.where(s > 1e-12, s, 1.0)


def _factorize(model, c, log_theta, jitter=None):
    xn = model.normalize(model.x_train)
    yn = (model.y_train[:, c] - model.y_mean[c]) / model.y_std[c]
    s2 = np.exp(log_theta[0])
    ell = np.exp(log_theta[1:-1])
    k_unit, _, _ = _matern52_parts(_sq_diffs(xn), ell)
    k = s2 * k_unit + np.exp(log_theta[-1]) * np.eye(len(xn))
    if jitter is None:
        chol, jitter = _cholesky(k)
    else:
        chol = np.linalg.cholesky(k + jitter * float(np.mean(np.diag(k))) * np.eye(len(k)))
    alpha = cho_solve((chol, True), yn)
    return _Output(np.asarray(log_theta, float).copy(), chol, alpha, jitter)


def fit(points, velocities, max_points: int = 1000, optimizer_restarts: int = 5,
        seed: int = 0, hyperparameters=None, max_iter: int = 200) -> GpFlowModel:
    """Fit the two-output velocity field.

    Parameters
    ----------
    points : (n, 3) array of (x, y, t)
    velocities : (n, 2) array of (vx, vy)
    max_points : rows kept after uniform subsampling
    optimizer_restarts : number of L-BFGS starts (the first from a fixed default)
    hyperparameters : optional (2, 5) log hyperparameters; skips optimisation
    """
    x = np.asarray(points, float)
    y = np.asarray(velocities, float)
    if x.ndim != 2 or x.shape[1] != 3 or y.shape != (len(x), 2):
        raise ValueError("expected points (n, 3) and velocities (n, 2)")
    if len(x) < 2:
        raise ValueError("need at least two training points")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("training data must be finite")
    rng = np.random.default_rng(seed)
    if len(x) > max_points:
        keep = np.sort(rng.choice(len(x), size=max_points, replace=False))
        x, y = x[keep], y[keep]
    model = GpFlowModel(x.copy(), y.copy(), x.mean(0), _safe_std(x), y.mean(0), _safe_std(y))
    xn = model.normalize(x)
    for c in range(2):
        if hyperparameters is not None:
            theta = np.asarray(hyperparameters, float)[c]
        else:
            yn = (y[:, c] - model.y_mean[c]) / model.y_std[c]
            theta = _optimize(xn, yn, optimizer_restarts, rng, max_iter)
        model.outputs.append(_factorize(model, c, theta))
    return model


def _optimize(xn, yn, restarts, rng, max_iter):
    d = xn.shape[1]
    lo, hi = LOG_BOUNDS
    sqd = _sq_diffs(xn)

    def objective(theta):
        try:
            lml, g = _lml(sqd, yn, theta)
        except GPFitError:
            return 1e25, np.zeros_like(theta)
        return -lml, -g

    starts = [np.concatenate([[0.0], np.zeros(d), [np.log(0.1)]])]
    for _ in range(max(restarts, 1) - 1):
        starts.append(np.concatenate([
            rng.uniform(np.log(0.1), np.log(10.0), 1),
            rng.uniform(np.log(0.1), np.log(10.0), d),
            rng.uniform(np.log(1e-3), np.log(1.0), 1),
        ]))
    best = None
    for x0 in starts:
        res = minimize(objective, x0, jac=True, method="L-BFGS-B",
                       bounds=[(lo, hi)] * (d + 2), options={"maxiter": max_iter})
        if np.isfinite(res.fun) and res.fun < 1e24 and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise GPFitError("no restart produced a positive definite kernel")
    return best.x


def predict(model: GpFlowModel, query, include_noise: bool = False):
    if not model.outputs:
        raise RuntimeError("GP model is not fitted")
    q = np.asarray(query, float)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    qn = model.normalize(q)
    xn = model.normalize(model.x_train)
    mean = np.empty((len(q), 2))
    std = np.empty((len(q), 2))
    for c, out in enumerate(model.outputs):
        ks = matern52(qn, xn, out.signal_var, out.lengthscales)
        mu = ks @ out.alpha
        v = solve_triangular(out.chol, ks.T, lower=True)
        var = out.signal_var - np.sum(v * v, axis=0)
        if include_noise:
            var = var + out.noise_var
        var = np.maximum(var, 1e-12 * out.signal_var)
        mean[:, c] = mu * model.y_std[c] + model.y_mean[c]
        std[:, c] = np.sqrt(var) * model.y_std[c]
    if single:
        return mean[0], std[0]
    return mean, std
