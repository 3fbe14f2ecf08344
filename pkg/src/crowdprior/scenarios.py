"""The six built-in environments.

Sizes and frame counts follow the usual steering benchmark layouts: three
bottlenecks, concentric circles, and two- and four-way hallways.  Every
builder takes ``n_agents`` so the same geometry serves density sweeps.
"""
from __future__ import annotations

import numpy as np

from .geometry import AgentSpec, Rect, Scenario

AGENT_RADIUS = 0.3


def _grid(n, x0, x1, y0, y1):
    """``n`` points on a near-square lattice filling the box."""
    if n == 0:
        return np.zeros((0, 2))
    w, h = x1 - x0, y1 - y0
    cols = max(1, int(np.ceil(np.sqrt(n * w / h))))
    rows = int(np.ceil(n / cols))
    xs = np.linspace(x0, x1, cols) if cols > 1 else np.array([(x0 + x1) / 2])
    ys = np.linspace(y0, y1, rows) if rows > 1 else np.array([(y0 + y1) / 2])
    pts = np.array([(x, y) for y in ys for x in xs])
    return pts[:n]


def _roster(starts, goals, radius=AGENT_RADIUS):
    return [AgentSpec(radius, (float(s[0]), float(s[1])), (float(g[0]), float(g[1])))
            for s, g in zip(starts, goals)]


def bottleneck_evacuation(n_agents: int = 30) -> Scenario:
    # room on the left, single 3 m door at x = 100
    obstacles = [Rect(100, 0, 101, 78.5), Rect(100, 81.5, 101, 160)]
    starts = _grid(n_agents, 72, 94, 68, 92)
    goals = _grid(n_agents, 150, 172, 62, 98)
    return Scenario("bottleneck-evacuation", 200, 160, obstacles, _roster(starts, goals),
                    n_frames=101)


def bottleneck_evacuation_2(n_agents: int = 40) -> Scenario:
    obstacles = [Rect(50, 0, 51, 39), Rect(50, 41, 51, 80)]
    starts = _grid(n_agents, 36, 48, 32, 48)
    goals = _grid(n_agents, 68, 86, 28, 52)
    return Scenario("bottleneck-evacuation-2", 100, 80, obstacles, _roster(starts, goals),
                    n_frames=53)


def bottleneck_squeeze(n_agents: int = 30) -> Scenario:
    # 3 m wide, 20 m long corridor between two blocks
    obstacles = [Rect(90, 0, 110, 98.5), Rect(90, 101.5, 110, 200)]
    starts = _grid(n_agents, 58, 84, 86, 114)
    goals = _grid(n_agents, 128, 152, 86, 114)
    return Scenario("bottleneck-squeeze", 200, 200, obstacles, _roster(starts, goals),
                    n_frames=94)


def concentric_circles(n_agents: int = 20) -> Scenario:
    ang = 2 * np.pi * np.arange(n_agents) / max(n_agents, 1)
    ring = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    starts = 10 + 8 * ring
    goals = 10 - 8 * ring
    return Scenario("concentric-circles", 20, 20, [], _roster(starts, goals), n_frames=37)


def hallway_two_way(n_agents: int = 30) -> Scenario:
    # two long blocks leave a 10 m hallway around y = 100
    obstacles = [Rect(20, 55, 180, 95), Rect(20, 105, 180, 145)]
    n_right = (n_agents + 1) // 2
    n_left = n_agents - n_right
    s_right = _grid(n_right, 4, 16, 96.5, 103.5)
    g_right = _grid(n_right, 184, 196, 96.5, 103.5)
    s_left = _grid(n_left, 184, 196, 96.5, 103.5)
    g_left = _grid(n_left, 4, 16, 96.5, 103.5)
    starts = np.concatenate([s_right, s_left])
    goals = np.concatenate([g_right, g_left])
    return Scenario("hallway-two-way", 200, 200, obstacles, _roster(starts, goals),
                    n_frames=101)


def hallway_four_way(n_agents: int = 40) -> Scenario:
    obstacles = [Rect(0, 0, 95, 95), Rect(105, 0, 200, 95),
                 Rect(0, 105, 95, 200), Rect(105, 105, 200, 200)]
    counts = [n_agents // 4 + (1 if k < n_agents % 4 else 0) for k in range(4)]
    lane = (96.5, 103.5)
    groups = [
        (_grid(counts[0], 8, 22, *lane), _grid(counts[0], 178, 192, *lane)),       # west -> east
        (_grid(counts[1], 178, 192, *lane), _grid(counts[1], 8, 22, *lane)),       # east -> west
        (_grid(counts[2], *lane, 8, 22), _grid(counts[2], *lane, 178, 192)),       # south -> north
        (_grid(counts[3], *lane, 178, 192), _grid(counts[3], *lane, 8, 22)),       # north -> south
    ]
    starts = np.concatenate([g[0] for g in groups])
    goals = np.concatenate([g[1] for g in groups])
    return Scenario("hallway-four-way", 200, 200, obstacles, _roster(starts, goals),
                    n_frames=101)


BUILTIN = {
    "bottleneck-evacuation": bottleneck_evacuation,
    "bottleneck-evacuation-2": bottleneck_evacuation_2,
    "bottleneck-squeeze": bottleneck_squeeze,
    "concentric-circles": concentric_circles,
    "hallway-two-way": hallway_two_way,
    "hallway-four-way": hallway_four_way,
}


def get_scenario(name: str, n_agents: int | None = None) -> Scenario:
    """Build a built-in scenario, optionally overriding its agent count."""
    try:
        builder = BUILTIN[name]
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; choose from {sorted(BUILTIN)}") from None
    return builder() if n_agents is None else builder(n_agents)
