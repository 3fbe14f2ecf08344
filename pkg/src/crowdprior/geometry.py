"""Scenario geometry, 360-ray scans and continuous collision tests.

Obstacles are axis-aligned rectangles and agents are discs.  Every function
here is pure; the vectorised helpers (``_segments_collide``,
``_segment_rect_distance``) broadcast over leading axes so that collision
counting over whole runs stays in numpy.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

N_RAYS = 360
DEFAULT_SCAN_RANGE = 10.0

_RAY_ANGLES = np.deg2rad(np.arange(N_RAYS, dtype=float))
RAY_DIRECTIONS = np.stack([np.cos(_RAY_ANGLES), np.sin(_RAY_ANGLES)], axis=1)
RAY_DIRECTIONS[np.abs(RAY_DIRECTIONS) < 1e-15] = 0.0


class ScenarioError(ValueError):
    """Raised for malformed or inconsistent scenario descriptions."""


@dataclass(frozen=True)
class Rect:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ScenarioError(f"obstacle has non-positive area: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.xmin, self.ymin, self.xmax, self.ymax], dtype=float)


@dataclass(frozen=True)
class Disc:
    center: tuple[float, float]
    radius: float
    velocity: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("disc radius must be positive")


@dataclass(frozen=True)
class AgentSpec:
    radius: float
    start: tuple[float, float]
    goal: tuple[float, float]


@dataclass
class Scenario:
    """Environment bounds, rectangular obstacles and the agent roster."""

    name: str
    width: float
    height: float
    obstacles: list[Rect] = field(default_factory=list)
    agents: list[AgentSpec] = field(default_factory=list)
    scan_range: float = DEFAULT_SCAN_RANGE
    n_frames: int = 101

    def __post_init__(self):
        self.obstacles = [o if isinstance(o, Rect) else Rect(*o) for o in self.obstacles]
        self.validate()

    def validate(self):
        if not (self.width > 0 and self.height > 0):
            raise ScenarioError("scenario width and height must be positive")
        if self.scan_range <= 0:
            raise ScenarioError("scan_range must be positive")
        if self.n_frames < 2:
            raise ScenarioError("n_frames must be at least 2")
        for k, a in enumerate(self.agents):
            if a.radius <= 0:
                raise ScenarioError(f"agent {k}: radius must be positive")
            for label, p in (("start", a.start), ("goal", a.goal)):
                if not (0 <= p[0] <= self.width and 0 <= p[1] <= self.height):
                    raise ScenarioError(f"agent {k}: {label} {p} outside bounds")
                if self.point_clearance(p) <= a.radius:
                    raise ScenarioError(f"agent {k}: {label} {p} intersects an obstacle")

    @property
    def obstacle_array(self) -> np.ndarray:
        if not self.obstacles:
            return np.zeros((0, 4))
        return np.stack([o.as_array() for o in self.obstacles])

    @property
    def radii(self) -> np.ndarray:
        return np.array([a.radius for a in self.agents], dtype=float)

    @property
    def goals(self) -> np.ndarray:
        return np.array([a.goal for a in self.agents], dtype=float).reshape(-1, 2)

    @property
    def starts(self) -> np.ndarray:
        return np.array([a.start for a in self.agents], dtype=float).reshape(-1, 2)

    def point_clearance(self, p) -> float:
        """Distance from ``p`` to the nearest obstacle (inf if none)."""
        if not self.obstacles:
            return np.inf
        return float(point_rect_distance(np.asarray(p, float), self.obstacle_array).min())

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "width": self.width,
            "height": self.height,
            "scan_range": self.scan_range,
            "n_frames": self.n_frames,
            "obstacles": [[o.xmin, o.ymin, o.xmax, o.ymax] for o in self.obstacles],
            "agents": [
                {"radius": a.radius, "start": list(a.start), "goal": list(a.goal)}
                for a in self.agents
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        required = {"name", "width", "height", "obstacles", "agents"}
        missing = required - set(d)
        if missing:
            raise ScenarioError(f"scenario missing fields: {sorted(missing)}")
        unknown = set(d) - required - {"scan_range", "n_frames"}
        if unknown:
            raise ScenarioError(f"unknown scenario fields: {sorted(unknown)}")
        obstacles = []
        for o in d["obstacles"]:
            if len(o) != 4:
                raise ScenarioError(f"obstacle must be [xmin, ymin, xmax, ymax], got {o}")
            obstacles.append(Rect(*map(float, o)))
        agents = []
        for a in d["agents"]:
            try:
                agents.append(AgentSpec(float(a["radius"]), _pt(a["start"]), _pt(a["goal"])))
            except (KeyError, TypeError) as exc:
                raise ScenarioError(f"bad agent entry {a!r}") from exc
        return cls(
            name=str(d["name"]),
            width=float(d["width"]),
            height=float(d["height"]),
            obstacles=obstacles,
            agents=agents,
            scan_range=float(d.get("scan_range", DEFAULT_SCAN_RANGE)),
            n_frames=int(d.get("n_frames", 101)),
        )


def _pt(v) -> tuple[float, float]:
    if len(v) != 2:
        raise ScenarioError(f"expected a 2D point, got {v!r}")
    return (float(v[0]), float(v[1]))


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        return Scenario.from_dict(json.load(fh))


def save_scenario(scenario: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario.to_dict(), indent=2) + "\n")


# --------------------------------------------------------------------------
# ray casting

@dataclass(frozen=True)
class RayScan:
    distances: np.ndarray   # (360,)
    velocities: np.ndarray  # (360, 2)


def _ray_disc_hits(origin, dirs, centers, radii):
    """Distance along each ray to each disc, inf for a miss. Shape (rays, discs)."""
    m = origin[None, :] - centers                     # (D, 2)
    b = dirs @ m.T                                    # (R, D)
    c = np.einsum("ij,ij->i", m, m) - radii ** 2      # (D,)
    disc = b * b - c[None, :]
    with np.errstate(invalid="ignore"):
        root = np.sqrt(disc)
    s = -b - root
    # origin exactly on a surface: c == 0, first root is 0 and counts as a hit
    hit = (disc >= 0) & (s >= 0)
    return np.where(hit, s, np.inf)


def _ray_rect_hits(origin, dirs, rects):
    """Slab test distances, inf for a miss.  Shape (rays, rects)."""
    lo = rects[:, :2]
    hi = rects[:, 2:]
    tmin = np.full((dirs.shape[0], rects.shape[0]), -np.inf)
    tmax = np.full_like(tmin, np.inf)
    for ax in range(2):
        d = dirs[:, ax][:, None]
        o = origin[ax]
        parallel = d == 0
        inside = (lo[:, ax] <= o) & (o <= hi[:, ax])
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo[:, ax][None, :] - o) / d
            t2 = (hi[:, ax][None, :] - o) / d
        near = np.where(parallel, np.where(inside[None, :], -np.inf, np.inf), np.minimum(t1, t2))
        far = np.where(parallel, np.where(inside[None, :], np.inf, -np.inf), np.maximum(t1, t2))
        tmin = np.maximum(tmin, near)
        tmax = np.minimum(tmax, far)
    hit = (tmax >= tmin) & (tmin >= 0)
    return np.where(hit, tmin, np.inf)


def ray_scan(center, scan_range: float = DEFAULT_SCAN_RANGE,
             others: Sequence[Disc] = (), obstacles: Iterable = ()) -> RayScan:
    """Cast 360 rays (1 degree apart, CCW from +x) and report the first hit.

    Parameters
    ----------
    center : array_like, shape (2,)
        Scan origin.
    scan_range : float
        Maximum range ``R``; misses report exactly ``R``.
    others : sequence of Disc
        Other agents; the velocity of a hit disc is reported in ``velocities``.
    obstacles : iterable of Rect or [xmin, ymin, xmax, ymax]
        Static obstacles, reported with zero velocity.
    """
    if not scan_range > 0:
        raise ValueError("scan_range must be positive")
    centers = np.array([d.center for d in others], float).reshape(-1, 2)
    radii = np.array([d.radius for d in others], float)
    vels = np.array([d.velocity for d in others], float).reshape(-1, 2)
    rects = np.array([o.as_array() if isinstance(o, Rect) else o for o in obstacles],
                     float).reshape(-1, 4)
    return _scan(np.asarray(center, float), scan_range, centers, radii, vels, rects)


def _scan(origin, scan_range, centers, radii, vels, rects) -> RayScan:
    n = RAY_DIRECTIONS.shape[0]
    best_disc = np.full(n, np.inf)
    disc_idx = np.zeros(n, dtype=int)
    if len(centers):
        hits = _ray_disc_hits(origin, RAY_DIRECTIONS, centers, radii)
        disc_idx = np.argmin(hits, axis=1)
        best_disc = hits[np.arange(n), disc_idx]
    best_rect = np.full(n, np.inf)
    if len(rects):
        best_rect = _ray_rect_hits(origin, RAY_DIRECTIONS, rects).min(axis=1)
    use_disc = best_disc <= best_rect
    dist = np.where(use_disc, best_disc, best_rect)
    within = dist < scan_range
    velocities = np.zeros((n, 2))
    if len(centers):
        sel = use_disc & within
        velocities[sel] = vels[disc_idx[sel]]
    return RayScan(np.where(within, dist, scan_range), velocities)


# --------------------------------------------------------------------------
# continuous collision tests

def _segments_collide(pa0, pa1, pb0, pb1, rsum):
    """Broadcasting core of :func:`segment_collision`.

    Roots of ``|d0 + s dv|^2 - rsum^2`` decide whether the open interval where
    the discs overlap meets ``s in [0, 1]``.
    """
    d0 = np.asarray(pa0, float) - np.asarray(pb0, float)
    dv = (np.asarray(pa1, float) - np.asarray(pa0, float)) - (
        np.asarray(pb1, float) - np.asarray(pb0, float))
    a = np.sum(dv * dv, axis=-1)
    b = 2.0 * np.sum(d0 * dv, axis=-1)
    c = np.sum(d0 * d0, axis=-1) - np.asarray(rsum, float) ** 2
    disc = b * b - 4.0 * a * c
    moving = a > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        root = np.sqrt(np.where(disc > 0, disc, 0.0))
        s1 = (-b - root) / (2.0 * a)
        s2 = (-b + root) / (2.0 * a)
    crosses = moving & (disc > 0) & (s1 < 1.0) & (s2 > 0.0)
    return (c < 0) | crosses


def segment_collision(p_a0, p_a1, p_b0, p_b1, r_a: float, r_b: float) -> bool:
    """True iff two discs moving linearly over one step come strictly closer
    than ``r_a + r_b`` at some instant.  Touching exactly is not a collision."""
    if not (r_a > 0 and r_b > 0):
        raise ValueError("radii must be positive")
    return bool(_segments_collide(p_a0, p_a1, p_b0, p_b1, r_a + r_b))


def point_rect_distance(p, rects):
    """Euclidean distance from points ``p[..., 2]`` to rectangles ``rects[..., 4]``
    (broadcast); zero inside."""
    p = np.asarray(p, float)
    rects = np.asarray(rects, float)
    dx = np.maximum(np.maximum(rects[..., 0] - p[..., 0], 0.0), p[..., 0] - rects[..., 2])
    dy = np.maximum(np.maximum(rects[..., 1] - p[..., 1], 0.0), p[..., 1] - rects[..., 3])
    return np.hypot(dx, dy)


def _point_segment_distance(q, p0, p1):
    d = p1 - p0
    dd = np.sum(d * d, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(dd > 0, np.sum((q - p0) * d, axis=-1) / dd, 0.0)
    s = np.clip(s, 0.0, 1.0)
    closest = p0 + s[..., None] * d
    return np.linalg.norm(q - closest, axis=-1)


def _segment_hits_rect(p0, p1, rects):
    d = p1 - p0
    tmin = np.zeros(np.broadcast_shapes(p0.shape[:-1], rects.shape[:-1]))
    tmax = np.ones_like(tmin)
    for ax in range(2):
        lo, hi = rects[..., ax], rects[..., ax + 2]
        o, da = p0[..., ax], d[..., ax]
        parallel = da == 0
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - o) / da
            t2 = (hi - o) / da
        inside = (lo <= o) & (o <= hi)
        near = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
        far = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
        tmin = np.maximum(tmin, near)
        tmax = np.minimum(tmax, far)
    return tmin <= tmax


def _segment_rect_distance(p0, p1, rects):
    """Exact distance between segments ``p0->p1`` and filled rectangles."""
    p0 = np.asarray(p0, float)
    p1 = np.asarray(p1, float)
    rects = np.asarray(rects, float)
    best = np.minimum(point_rect_distance(p0, rects), point_rect_distance(p1, rects))
    for cx, cy in ((0, 1), (2, 1), (2, 3), (0, 3)):
        corner = np.stack([rects[..., cx], rects[..., cy]], axis=-1)
        best = np.minimum(best, _point_segment_distance(corner, p0, p1))
    return np.where(_segment_hits_rect(p0, p1, rects), 0.0, best)


def segment_obstacle_collision(p0, p1, r: float, obstacle) -> bool:
    """True iff a disc of radius ``r`` swept along ``p0 -> p1`` comes strictly
    within ``r`` of the rectangle (the rectangle inflated with rounded corners)."""
    if not r > 0:
        raise ValueError("radius must be positive")
    rect = obstacle.as_array() if isinstance(obstacle, Rect) else np.asarray(obstacle, float)
    return bool(_segment_rect_distance(p0, p1, rect) < r)


def count_collisions(trajectories, radii, scenario: Scenario | None = None,
                     obstacles=None) -> dict:
    """Count per-step continuous collisions.

    ``trajectories`` is an array ``(N, T+1, 2)`` or a sequence of objects with
    a ``points`` attribute; every (pair, step) and (agent, obstacle, step)
    event counts once.
    """
    pts = _stack_points(trajectories)
    radii = np.asarray(radii, float)
    n = pts.shape[0]
    if radii.shape != (n,):
        raise ValueError("need one radius per agent")
    if obstacles is None:
        obstacles = scenario.obstacle_array if scenario is not None else np.zeros((0, 4))
    obstacles = np.asarray(obstacles, float).reshape(-1, 4)

    agent_agent = 0
    if n > 1:
        i, j = np.triu_indices(n, k=1)
        hit = _segments_collide(pts[i, :-1], pts[i, 1:], pts[j, :-1], pts[j, 1:],
                                (radii[i] + radii[j])[:, None])
        agent_agent = int(hit.sum())
    agent_obstacle = 0
    if n and len(obstacles):
        p0 = pts[:, None, :-1, :]
        p1 = pts[:, None, 1:, :]
        rect = obstacles[None, :, None, :]
        dist = _segment_rect_distance(p0, p1, rect)
        agent_obstacle = int((dist < radii[:, None, None]).sum())
    return {"agent_agent": agent_agent, "agent_obstacle": agent_obstacle}


def _stack_points(trajectories) -> np.ndarray:
    if isinstance(trajectories, np.ndarray):
        pts = trajectories
    else:
        seq = [getattr(t, "points", t) for t in trajectories]
        if not seq:
            return np.zeros((0, 2, 2))
        lengths = {len(p) for p in seq}
        if len(lengths) != 1:
            raise ValueError("trajectories must share the same time grid")
        pts = np.stack([np.asarray(p, float) for p in seq])
    if pts.ndim != 3 or pts.shape[-1] != 2:
        raise ValueError("expected trajectories of shape (N, T+1, 2)")
    return pts
