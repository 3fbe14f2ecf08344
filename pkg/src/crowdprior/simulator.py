"""Ground-truth crowd generation and construction of the interpolation task.

The simulator is a plain social-force model (desired-velocity relaxation plus
exponential agent and wall repulsion) with visibility-graph waypoints so that
agents route around obstacles instead of pinning against them.

The repulsion strengths are amplitudes of exponential potentials
``A exp((r - d) / B)`` measured from the body surfaces; the force is the
potential gradient, of magnitude ``(A / B) exp((r - d) / B)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse.csgraph import dijkstra

from .geometry import Scenario, _segment_rect_distance, point_rect_distance

GOAL_TOLERANCE = 0.5


@dataclass
class Trajectory:
    """Positions of one agent on a uniform grid plus its observation mask.

    Frames with ``mask == 0`` are unobserved; in an observed copy produced by
    :func:`mask_segment` their positions are NaN.
    """

    agent_id: int
    points: np.ndarray
    mask: np.ndarray
    dt: float

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        self.mask = np.asarray(self.mask, dtype=np.int8)
        if self.points.ndim != 2 or self.points.shape[1] != 2 or len(self.points) < 2:
            raise ValueError("points must have shape (T+1, 2) with T >= 1")
        if self.mask.shape != (len(self.points),):
            raise ValueError("mask length must match points")
        if self.mask[0] != 1:
            raise ValueError("initial frame must be observed")
        if not np.all(np.isfinite(self.points[self.mask == 1])):
            raise ValueError("observed points must be finite")

    def __len__(self):
        return len(self.points)

    @property
    def n_steps(self) -> int:
        return len(self.points) - 1


@dataclass(frozen=True)
class SocialForceParams:
    desired_speed: float = 1.3
    relaxation_time: float = 0.5
    agent_strength: float = 2.0
    agent_range: float = 0.3
    obstacle_strength: float = 4.0
    obstacle_range: float = 0.2
    sim_step: float = 0.05
    frame_subsample: int = 30
    start_jitter: float = 0.5
    max_speed_factor: float = 1.5

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not value > 0:
                raise ValueError(f"{name} must be strictly positive")

    @property
    def dt(self) -> float:
        return self.sim_step * self.frame_subsample


# --------------------------------------------------------------------------
# navigation

class _Router:
    """Shortest paths over a visibility graph of inflated obstacle corners."""

    def __init__(self, scenario: Scenario, clearance: float, radius: float):
        self.rects = scenario.obstacle_array
        self.radius = radius
        nodes = []
        for xmin, ymin, xmax, ymax in self.rects:
            for cx, cy in ((xmin - clearance, ymin - clearance), (xmax + clearance, ymin - clearance),
                           (xmax + clearance, ymax + clearance), (xmin - clearance, ymax + clearance)):
                if 0 <= cx <= scenario.width and 0 <= cy <= scenario.height:
                    if point_rect_distance(np.array([cx, cy]), self.rects).min() > radius:
                        nodes.append((cx, cy))
        self.nodes = np.array(nodes, float).reshape(-1, 2)
        k = len(self.nodes)
        self.adj = np.full((k, k), np.inf)
        for i in range(k):
            for j in range(i + 1, k):
                if self.visible(self.nodes[i], self.nodes[j]):
                    d = float(np.linalg.norm(self.nodes[i] - self.nodes[j]))
                    self.adj[i, j] = self.adj[j, i] = d

    def visible(self, a, b) -> bool:
        if not len(self.rects):
            return True
        return bool(np.all(_segment_rect_distance(np.asarray(a, float), np.asarray(b, float),
                                                  self.rects) > self.radius))

    def route(self, start, goal) -> list:
        """Waypoints from ``start`` to ``goal`` (goal included, start excluded)."""
        if self.visible(start, goal) or not len(self.nodes):
            return [np.asarray(goal, float)]
        k = len(self.nodes)
        g = np.zeros((k + 2, k + 2))
        g[:k, :k] = np.where(np.isfinite(self.adj), self.adj, 0.0)
        for idx, p in ((k, start), (k + 1, goal)):
            for i in range(k):
                if self.visible(p, self.nodes[i]):
                    g[idx, i] = g[i, idx] = float(np.linalg.norm(self.nodes[i] - p))
        dist, pred = dijkstra(g, directed=False, indices=k, return_predecessors=True)
        if not np.isfinite(dist[k + 1]):
            return [np.asarray(goal, float)]
        path = []
        node = pred[k + 1]
        while node != k and node >= 0:
            path.append(self.nodes[node])
            node = pred[node]
        return path[::-1] + [np.asarray(goal, float)]


# --------------------------------------------------------------------------
# simulation

def _initial_positions(scenario: Scenario, params: SocialForceParams, rng) -> np.ndarray:
    starts = scenario.starts.copy()
    radii = scenario.radii
    n = len(starts)
    for i in range(n):
        for j in range(i):
            if np.linalg.norm(starts[i] - starts[j]) < radii[i] + radii[j]:
                raise ValueError(f"agents {j} and {i} start overlapping")
    rects = scenario.obstacle_array
    placed = np.empty_like(starts)
    for i in range(n):
        candidate = starts[i]
        for _ in range(100):
            trial = starts[i] + rng.uniform(-params.start_jitter, params.start_jitter, 2)
            inside = 0 <= trial[0] <= scenario.width and 0 <= trial[1] <= scenario.height
            clear = not len(rects) or point_rect_distance(trial, rects).min() > radii[i]
            apart = i == 0 or np.all(np.linalg.norm(placed[:i] - trial, axis=1)
                                     > radii[:i] + radii[i] + 0.05)
            if inside and clear and apart:
                candidate = trial
                break
        placed[i] = candidate
    return placed


def _obstacle_force(x, radii, rects, strength, reach):
    if not len(rects):
        return np.zeros_like(x)
    q = np.clip(x[:, None, :], rects[None, :, :2], rects[None, :, 2:])
    diff = x[:, None, :] - q
    d = np.linalg.norm(diff, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        n = np.where(d[..., None] > 0, diff / d[..., None], 0.0)
    mag = strength / reach * np.exp(np.minimum((radii[:, None] - d) / reach, 30.0))
    return np.sum(mag[..., None] * n, axis=1)


def _agent_force(x, radii, strength, reach):
    n = len(x)
    if n < 2:
        return np.zeros_like(x)
    diff = x[:, None, :] - x[None, :, :]
    d = np.linalg.norm(diff, axis=-1)
    np.fill_diagonal(d, np.inf)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(np.isfinite(d)[..., None] & (d[..., None] > 0), diff / d[..., None], 0.0)
    rsum = radii[:, None] + radii[None, :]
    mag = strength / reach * np.exp(np.minimum((rsum - d) / reach, 30.0))
    return np.sum(mag[..., None] * unit, axis=1)


def simulate(scenario: Scenario, params: SocialForceParams | None = None, seed: int = 0,
             n_frames: int | None = None) -> list[Trajectory]:
    """Run the social-force model and emit one fully observed trajectory per agent.

    Initial positions are the roster starts jittered by ``seed``.  Output frames
    are every ``frame_subsample`` integration steps, so the emitted grid has
    ``dt = sim_step * frame_subsample``.
    """
    params = params or SocialForceParams()
    n_frames = n_frames or scenario.n_frames
    n = len(scenario.agents)
    if n == 0:
        return []
    rng = np.random.default_rng(seed)
    x = _initial_positions(scenario, params, rng)
    radii = scenario.radii
    goals = scenario.goals
    rects = scenario.obstacle_array
    v = np.zeros_like(x)
    vmax = params.max_speed_factor * params.desired_speed

    clearance = float(radii.max()) + 0.6
    routers = {}
    routes = []
    for i in range(n):
        r = round(float(radii[i]), 9)
        if r not in routers:
            routers[r] = _Router(scenario, clearance, r + 0.05)
        routes.append(routers[r].route(x[i], goals[i]))
    router_of = [routers[round(float(radii[i]), 9)] for i in range(n)]
    leg = np.zeros(n, dtype=int)
    frozen = np.linalg.norm(x - goals, axis=1) < GOAL_TOLERANCE

    out = np.empty((n_frames, n, 2))
    out[0] = x
    h = params.sim_step
    for frame in range(1, n_frames):
        for step in range(params.frame_subsample):
            if step % 10 == 0:
                for i in range(n):
                    # string-pull: skip a waypoint once the next one is in sight
                    while leg[i] < len(routes[i]) - 1 and (
                            np.linalg.norm(routes[i][leg[i]] - x[i]) < 1.0
                            or router_of[i].visible(x[i], routes[i][leg[i] + 1])):
                        leg[i] += 1
            target = np.stack([routes[i][leg[i]] for i in range(n)])
            to_target = target - x
            dist = np.linalg.norm(to_target, axis=1, keepdims=True)
            e = np.where(dist > 0, to_target / np.maximum(dist, 1e-12), 0.0)
            force = (params.desired_speed * e - v) / params.relaxation_time
            force += _agent_force(x, radii, params.agent_strength, params.agent_range)
            force += _obstacle_force(x, radii, rects, params.obstacle_strength,
                                     params.obstacle_range)
            v = v + h * force
            speed = np.linalg.norm(v, axis=1, keepdims=True)
            v = np.where(speed > vmax, v * (vmax / np.maximum(speed, 1e-12)), v)
            v[frozen] = 0.0
            x = x + h * v
            frozen |= np.linalg.norm(x - goals, axis=1) < GOAL_TOLERANCE
        out[frame] = x

    dt = params.dt
    ones = np.ones(n_frames, dtype=np.int8)
    return [Trajectory(i, out[:, i, :].copy(), ones.copy(), dt) for i in range(n)]


# --------------------------------------------------------------------------
# interpolation task

def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5 + 1e-9))


def mask_segment(traj: Trajectory, fraction: float, seed: int) -> Trajectory:
    """Hide one contiguous interior block of ``round(fraction * (T+1))`` frames.

    The first and last frames stay observed.  Hidden positions become NaN in
    the returned copy; ``traj`` itself is left untouched as ground truth.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    n = len(traj)
    k = _round_half_up(fraction * n)
    if k < 1:
        raise ValueError(f"fraction {fraction} masks no frame of a length-{n} trajectory")
    if n - k < 2:
        raise ValueError(f"fraction {fraction} leaves fewer than 2 observed frames")
    rng = np.random.default_rng([int(seed), int(traj.agent_id)])
    start = int(rng.integers(1, n - k))      # block is [start, start + k), last frame kept
    mask = traj.mask.copy()
    mask[start:start + k] = 0
    pts = traj.points.copy()
    pts[mask == 0] = np.nan
    return replace(traj, points=pts, mask=mask)


def linear_init(traj: Trajectory) -> Trajectory:
    """Fill each unobserved run by straight-line interpolation between its
    observed neighbours.  Observed frames are returned unchanged."""
    obs = traj.mask == 1
    if not (obs[0] and obs[-1]):
        raise ValueError("first and last frames must be observed")
    if obs.all():
        return replace(traj, points=traj.points.copy())
    t = np.arange(len(traj))
    pts = traj.points.copy()
    for c in range(2):
        pts[~obs, c] = np.interp(t[~obs], t[obs], traj.points[obs, c])
    return replace(traj, points=pts)


def split_train_test(items: Sequence, ratio=(6, 1), seed: int = 0):
    """Random partition with sizes ``ratio[0] : ratio[1]`` (rounded), by item."""
    items = list(items)
    if not items:
        raise ValueError("nothing to split")
    n = len(items)
    n_test = _round_half_up(n * ratio[1] / (ratio[0] + ratio[1]))
    perm = np.random.default_rng(seed).permutation(n)
    test_idx = set(perm[:n_test].tolist())
    train = [it for k, it in enumerate(items) if k not in test_idx]
    test = [it for k, it in enumerate(items) if k in test_idx]
    return train, test


# --------------------------------------------------------------------------
# dataset files

DATASET_MAGIC = "# crowdprior-dataset v1"


def write_dataset(path, trajectories: Sequence[Trajectory], scenario: str, seed: int,
                  n_agents: int | None = None) -> None:
    """Write a run as ``agent_id,t,x,y,mask`` rows under a ``#`` metadata header.

    Floats use ``repr`` so a read-back is bit-exact.
    """
    dts = {t.dt for t in trajectories}
    if len(dts) > 1:
        raise ValueError("trajectories of one run must share dt")
    dt = dts.pop() if dts else 0.0
    lines = [DATASET_MAGIC,
             f"# scenario={scenario}",
             f"# dt={dt!r}",
             f"# seed={int(seed)}",
             f"# n_agents={len(trajectories) if n_agents is None else int(n_agents)}",
             "agent_id,t,x,y,mask"]
    for tr in trajectories:
        for t, ((x, y), m) in enumerate(zip(tr.points.tolist(), tr.mask.tolist())):
            lines.append(f"{tr.agent_id},{t},{x!r},{y!r},{m}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_dataset(path):
    """Inverse of :func:`write_dataset`; returns ``(meta, trajectories)``."""
    meta = {}
    rows = []
    with open(path) as fh:
        first = fh.readline().rstrip("\n")
        if first != DATASET_MAGIC:
            raise ValueError(f"{path}: not a crowdprior dataset")
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key] = value
            elif line.startswith("agent_id"):
                continue
            elif line:
                rows.append(line.split(","))
    meta["dt"] = float(meta["dt"])
    meta["seed"] = int(meta["seed"])
    meta["n_agents"] = int(meta["n_agents"])
    by_agent: dict[int, list] = {}
    for aid, t, x, y, m in rows:
        by_agent.setdefault(int(aid), []).append((int(t), float(x), float(y), int(m)))
    trajs = []
    for aid in sorted(by_agent):
        recs = sorted(by_agent[aid])
        pts = np.array([[r[1], r[2]] for r in recs])
        mask = np.array([r[3] for r in recs])
        trajs.append(Trajectory(aid, pts, mask, meta["dt"]))
    return meta, trajs
