"""Local collision-avoidance prior: observation features and a branched MLP.

The network sees the agent's desired velocity and current velocity, a
360-ray distance map, the 360x2 velocity map of whatever each ray hit, and
(GP-fed variant) the GP mean and standard deviation at the agent.  Each input
group has its own dense branch; the branches are concatenated at
``merge_depth`` and a dense trunk regresses the next velocity, clipped to
``[-clamp, clamp]`` per component.

Everything is plain numpy: forward pass, backpropagation and RMSprop.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import N_RAYS, RAY_DIRECTIONS, Scenario, _ray_rect_hits

GOAL_TOLERANCE = 0.5

BRANCH_INPUTS = {"desired": 4, "distance": N_RAYS, "velocity": 2 * N_RAYS,
                 "gp_mean": 2, "gp_std": 2}
_OFFSETS = {}
_o = 0
for _name, _dim in BRANCH_INPUTS.items():
    _OFFSETS[_name] = slice(_o, _o + _dim)
    _o += _dim
FEATURE_DIM_GP = _o
FEATURE_DIM = FEATURE_DIM_GP - 4


class DivergenceError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# observations

@dataclass
class LocalObservation:
    desired_velocity: np.ndarray       # (2,)
    distance_map: np.ndarray           # (360,)
    velocity_map: np.ndarray           # (360, 2)
    gp_branch: np.ndarray | None = None  # (4,): gp mean (2) then gp std (2)

    def features(self, current_velocity) -> np.ndarray:
        parts = [self.desired_velocity, np.asarray(current_velocity, float),
                 self.distance_map, self.velocity_map.reshape(-1)]
        if self.gp_branch is not None:
            parts.append(self.gp_branch)
        return np.concatenate(parts)

    def __len__(self):
        return 2 + N_RAYS + 2 * N_RAYS + (4 if self.gp_branch is not None else 0)


def desired_velocities(positions, goals, desired_speed=1.3):
    """Unit vector toward the goal scaled to ``desired_speed``; zero on arrival."""
    to_goal = np.asarray(goals, float) - np.asarray(positions, float)
    dist = np.linalg.norm(to_goal, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        v = np.where(dist > GOAL_TOLERANCE, desired_speed * to_goal / dist, 0.0)
    return v


def scan_all(positions, radii, velocities, rects, scan_range):
    """Ray scans for every agent at once, each agent excluding itself.

    Returns distances ``(N, 360)`` and hit velocities ``(N, 360, 2)``.
    """
    x = np.asarray(positions, float)
    n = len(x)
    radii = np.asarray(radii, float)
    dirs = RAY_DIRECTIONS
    m = x[:, None, :] - x[None, :, :]                    # (N, N, 2) origin - center
    b = np.einsum("rk,ijk->irj", dirs, m)                # (N, R, N)
    c = np.sum(m * m, axis=-1) - radii[None, :] ** 2     # (N, N)
    disc = b * b - c[:, None, :]
    with np.errstate(invalid="ignore"):
        s = -b - np.sqrt(disc)
    hit = (disc >= 0) & (s >= 0)
    hit[np.arange(n), :, np.arange(n)] = False
    dists = np.where(hit, s, np.inf)
    idx = np.argmin(dists, axis=2) if n else np.zeros((0, N_RAYS), int)
    best_disc = np.take_along_axis(dists, idx[..., None], axis=2)[..., 0]
    best_rect = np.full((n, N_RAYS), np.inf)
    rects = np.asarray(rects, float).reshape(-1, 4)
    if len(rects):
        for i in range(n):
            best_rect[i] = _ray_rect_hits(x[i], dirs, rects).min(axis=1)
    use_disc = best_disc <= best_rect
    dist = np.where(use_disc, best_disc, best_rect)
    within = dist < scan_range
    vel = np.asarray(velocities, float)[idx]             # (N, R, 2)
    vel = np.where((use_disc & within)[..., None], vel, 0.0)
    return np.where(within, dist, scan_range), vel


def build_observations(positions, prev_positions, scenario: Scenario, goals, dt,
                       desired_speed=1.3, gp=None, time=None):
    """Observations for all agents at one frame.

    Neighbour velocities are finite differences ``(x_t - x_{t-1}) / dt``.
    Returns a dict of arrays ``desired (N,2)``, ``distance (N,360)``,
    ``velocity (N,360,2)`` and, with ``gp``, ``gp (N,4)``.
    """
    x = np.asarray(positions, float)
    v = (x - np.asarray(prev_positions, float)) / dt
    dist, vel = scan_all(x, scenario.radii, v, scenario.obstacle_array, scenario.scan_range)
    obs = {"desired": desired_velocities(x, goals, desired_speed),
           "distance": dist, "velocity": vel}
    if gp is not None:
        q = np.column_stack([x, np.full(len(x), float(time if time is not None else 0.0))])
        mean, std = gp.predict(q, include_noise=True)
        obs["gp"] = np.concatenate([mean, std], axis=1)
    return obs


def build_observation(agent: int, positions, prev_positions, scenario: Scenario, goal,
                      dt: float = 1.5, desired_speed: float = 1.3, gp=None,
                      time=None) -> LocalObservation:
    """Observation of a single agent; see :func:`build_observations`."""
    positions = np.asarray(positions, float)
    if not 0 <= agent < len(positions):
        raise IndexError(f"agent index {agent} out of range")
    goals = np.zeros_like(positions)
    goals[agent] = goal
    obs = build_observations(positions, prev_positions, scenario, goals, dt,
                             desired_speed, gp, time)
    return LocalObservation(obs["desired"][agent], obs["distance"][agent],
                            obs["velocity"][agent],
                            obs["gp"][agent] if gp is not None else None)


def stack_features(obs: dict, current_velocity) -> np.ndarray:
    """Flatten a :func:`build_observations` dict into network inputs."""
    n = len(obs["desired"])
    parts = [obs["desired"], np.asarray(current_velocity, float).reshape(n, 2),
             obs["distance"], obs["velocity"].reshape(n, -1)]
    if "gp" in obs:
        parts.append(obs["gp"])
    return np.concatenate(parts, axis=1)


# --------------------------------------------------------------------------
# network

@dataclass
class MlpConfig:
    width: int = 1024
    depth: int = 10
    merge_depth: int = 6
    branch_widths: dict = field(default_factory=lambda: {
        "desired": 64, "distance": 256, "velocity": 256, "gp_mean": 32, "gp_std": 32})
    dropout: float = 0.2
    clamp: float = 2.6
    gp_fed: bool = False
    scan_range: float = 10.0

    def __post_init__(self):
        if not 2 <= self.merge_depth <= self.depth:
            raise ValueError("merge_depth must lie in [2, depth]")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def branches(self) -> list[str]:
        names = ["desired", "distance", "velocity"]
        return names + ["gp_mean", "gp_std"] if self.gp_fed else names

    @property
    def input_dim(self) -> int:
        return FEATURE_DIM_GP if self.gp_fed else FEATURE_DIM


class MlpPrior:
    """Branched multilayer perceptron regressing the next 2D velocity."""

    def __init__(self, config: MlpConfig | None = None, seed: int = 0):
        self.config = config or MlpConfig()
        self.sigma_nn: float | None = None
        self.params: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)
        cfg = self.config
        merged = 0
        for name in cfg.branches:
            fan_in = BRANCH_INPUTS[name]
            w = cfg.branch_widths[name]
            for k in range(cfg.merge_depth - 1):
                self._init_layer(f"{name}.{k}", fan_in, w, rng)
                fan_in = w
            merged += fan_in
        fan_in = merged
        for k in range(cfg.depth - cfg.merge_depth):
            self._init_layer(f"trunk.{k}", fan_in, cfg.width, rng)
            fan_in = cfg.width
        self._init_layer("head", fan_in, 2, rng, relu=False)

    def _init_layer(self, name, fan_in, fan_out, rng, relu=True):
        std = np.sqrt((2.0 if relu else 1.0) / fan_in)
        self.params[name + ".W"] = rng.normal(0.0, std, (fan_in, fan_out))
        self.params[name + ".b"] = np.zeros(fan_out)

    # ---- helpers
    def _branch_layers(self, name):
        return [f"{name}.{k}" for k in range(self.config.merge_depth - 1)]

    def _trunk_layers(self):
        return [f"trunk.{k}" for k in range(self.config.depth - self.config.merge_depth)]

    def _branch_input(self, x, name):
        h = x[:, _OFFSETS[name]]
        if name == "distance":
            h = h / self.config.scan_range
        return h

    def _check(self, x):
        x = np.atleast_2d(np.asarray(x, float))
        if x.shape[1] != self.config.input_dim:
            raise ValueError(f"expected {self.config.input_dim} input features, got {x.shape[1]}")
        return x

    # ---- forward / backward
    def _forward(self, x, train=False, rng=None):
        cfg = self.config
        p = self.params
        keep = 1.0 - cfg.dropout
        cache = {"relu": {}, "drop": {}, "in": {}}

        def dense(h, layer, relu=True):
            cache["in"][layer] = h
            z = h @ p[layer + ".W"] + p[layer + ".b"]
            if not relu:
                return z
            a = np.maximum(z, 0.0)
            cache["relu"][layer] = z > 0
            if train and cfg.dropout > 0:
                m = (rng.random(a.shape) < keep) / keep
                cache["drop"][layer] = m
                a = a * m
            return a

        outs = []
        for name in cfg.branches:
            h = self._branch_input(x, name)
            for layer in self._branch_layers(name):
                h = dense(h, layer)
            outs.append(h)
        cache["split"] = np.cumsum([o.shape[1] for o in outs])[:-1]
        h = np.concatenate(outs, axis=1)
        for layer in self._trunk_layers():
            h = dense(h, layer)
        z = dense(h, "head", relu=False)
        cache["z"] = z
        return np.clip(z, -cfg.clamp, cfg.clamp), cache

    def forward(self, features, train_mode: bool = False, rng=None) -> np.ndarray:
        """Predicted velocity for rows of ``features`` (or one feature vector).

        Dropout is active only with ``train_mode``; inference is deterministic.
        """
        single = np.ndim(features) == 1
        x = self._check(features)
        if train_mode and rng is None:
            rng = np.random.default_rng()
        y, _ = self._forward(x, train_mode, rng)
        return y[0] if single else y

    def predict(self, obs: LocalObservation, current_velocity) -> np.ndarray:
        return self.forward(obs.features(current_velocity))

    def _backward(self, cache, dy):
        cfg = self.config
        p = self.params
        grads = {}
        dz = dy * (np.abs(cache["z"]) < cfg.clamp)

        def dense_back(dout, layer, relu=True):
            if relu:
                if layer in cache["drop"]:
                    dout = dout * cache["drop"][layer]
                dout = dout * cache["relu"][layer]
            h = cache["in"][layer]
            grads[layer + ".W"] = h.T @ dout
            grads[layer + ".b"] = dout.sum(0)
            return dout @ p[layer + ".W"].T

        dh = dense_back(dz, "head", relu=False)
        for layer in reversed(self._trunk_layers()):
            dh = dense_back(dh, layer)
        pieces = np.split(dh, cache["split"], axis=1)
        for name, d in zip(cfg.branches, pieces):
            for layer in reversed(self._branch_layers(name)):
                d = dense_back(d, layer)
        return grads

    def loss_and_gradient(self, features, targets, train=False, rng=None):
        """Mean squared error over the batch and its gradient for every parameter."""
        x = self._check(features)
        y = np.asarray(targets, float).reshape(len(x), 2)
        pred, cache = self._forward(x, train, rng)
        r = pred - y
        loss = float(np.mean(r * r))
        grads = self._backward(cache, 2.0 * r / r.size)
        return loss, grads

    # ---- persistence
    def save(self, path) -> None:
        """Versioned flat binary: magic, header length, JSON header, raw float64 arrays."""
        names = list(self.params)
        header = {
            "version": 1,
            "config": asdict(self.config),
            "sigma_nn": self.sigma_nn,
            "layers": [[n, list(self.params[n].shape)] for n in names],
        }
        blob = json.dumps(header, sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(b"CPMLP")
        buf.write(struct.pack("<I", len(blob)))
        buf.write(blob)
        for n in names:
            buf.write(np.ascontiguousarray(self.params[n], dtype="<f8").tobytes(order="C"))
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path) -> "MlpPrior":
        data = Path(path).read_bytes()
        if data[:5] != b"CPMLP":
            raise ValueError(f"{path}: not an MLP weight file")
        (hlen,) = struct.unpack("<I", data[5:9])
        header = json.loads(data[9:9 + hlen])
        if header["version"] != 1:
            raise ValueError(f"unsupported weight file version {header['version']}")
        model = cls.__new__(cls)
        model.config = MlpConfig(**header["config"])
        model.sigma_nn = header["sigma_nn"]
        model.params = {}
        pos = 9 + hlen
        for name, shape in header["layers"]:
            size = int(np.prod(shape)) * 8
            model.params[name] = np.frombuffer(data[pos:pos + size], dtype="<f8").reshape(shape).copy()
            pos += size
        return model


def backprop_gradient(model: MlpPrior, features, targets) -> dict:
    """Analytic gradient of the batch MSE (dropout off)."""
    return model.loss_and_gradient(features, targets)[1]


# --------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch: int = 64
    dropout: float | None = None      # None keeps the model's configured rate
    max_epochs: int = 100
    early_stop_patience: int = 5
    val_fraction: float = 0.1
    rho: float = 0.9
    eps: float = 1e-7
    seed: int = 0


@dataclass
class TrainResult:
    train_loss: list
    val_loss: list
    best_epoch: int
    sigma_nn: float


def train(model: MlpPrior, features, targets, config: TrainConfig | None = None,
          verbose: bool = False) -> TrainResult:
    """Fit ``model`` in place with RMSprop on mean squared error.

    A ``val_fraction`` slice is held out for early stopping; the best
    validation weights are restored and ``model.sigma_nn`` is set to the
    root-mean-square validation residual.
    """
    cfg = config or TrainConfig()
    x = np.asarray(features, float)
    y = np.asarray(targets, float)
    if len(x) == 0:
        raise ValueError("empty training set")
    if cfg.dropout is not None:
        model.config.dropout = cfg.dropout
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(len(x))
    n_val = int(round(cfg.val_fraction * len(x)))
    if n_val == 0 or n_val == len(x):
        val_idx, tr_idx = perm, perm
    else:
        val_idx, tr_idx = perm[:n_val], perm[n_val:]
    xv, yv = x[val_idx], y[val_idx]

    acc = {k: np.zeros_like(v) for k, v in model.params.items()}
    best = (np.inf, -1, None)
    history_tr, history_val = [], []
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(tr_idx)
        losses = []
        for start in range(0, len(order), cfg.batch):
            b = order[start:start + cfg.batch]
            loss, grads = model.loss_and_gradient(x[b], y[b], train=True, rng=rng)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            rmsprop_step(model.params, grads, acc, cfg.lr, cfg.rho, cfg.eps)
            losses.append(loss * len(b))
        history_tr.append(float(np.sum(losses) / len(order)))
        val = float(np.mean((model.forward(xv) - yv) ** 2))
        if not np.isfinite(val) or not all(np.all(np.isfinite(v)) for v in model.params.values()):
            raise DivergenceError(f"weights diverged at epoch {epoch}")
        history_val.append(val)
        if verbose:
            print(f"epoch {epoch:3d}  train {history_tr[-1]:.5f}  val {val:.5f}")
        if val < best[0]:
            best = (val, epoch, {k: v.copy() for k, v in model.params.items()})
        elif epoch - best[1] >= cfg.early_stop_patience:
            break
    model.params = best[2]
    resid = model.forward(xv) - yv
    model.sigma_nn = float(np.sqrt(np.mean(resid ** 2)))
    return TrainResult(history_tr, history_val, best[1], model.sigma_nn)


def rmsprop_step(params, grads, acc, lr, rho=0.9, eps=1e-7):
    for k, g in grads.items():
        a = acc[k]
        a *= rho
        a += (1.0 - rho) * g * g
        params[k] -= lr * g / (np.sqrt(a) + eps)
