"""Evaluation scores and result tables."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.stats import rankdata


def dtw(a, b) -> float:
    """Dynamic-time-warping cost with Euclidean point distances.

    Both sequences are aligned end to end; the cost is the sum of matched
    pair distances along the cheapest monotone alignment.
    """
    a = np.atleast_2d(np.asarray(a, float))
    b = np.atleast_2d(np.asarray(b, float))
    if a.size == 0 or b.size == 0:
        raise ValueError("dtw needs two nonempty sequences")
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row = cost[i - 1]
        prev = acc[i - 1]
        cur = acc[i]
        # diagonal and vertical moves are vectorised, the horizontal one is a scan
        best = np.minimum(prev[1:], prev[:-1])
        for j in range(1, m + 1):
            cur[j] = row[j - 1] + min(best[j - 1], cur[j - 1])
    return float(acc[n, m])


def path_length(points) -> float:
    return float(np.sum(np.linalg.norm(np.diff(np.asarray(points, float), axis=0), axis=1)))


def relative_dtw(estimate, ground_truth) -> float:
    """``100 * dtw / ground-truth path length``; NaN when the path has zero length."""
    est = np.asarray(getattr(estimate, "points", estimate), float)
    gt = np.asarray(getattr(ground_truth, "points", ground_truth), float)
    if est.shape != gt.shape:
        raise ValueError("estimate and ground truth must share a time grid")
    length = path_length(gt)
    if length <= 0:
        return float("nan")
    return 100.0 * dtw(est, gt) / length


def rank_methods(table: dict, lower_is_better: bool = True) -> dict:
    """Average rank of each method over scenarios.

    ``table`` maps method -> {scenario: value}.  Ranks start at 1 for the best
    value and ties share the mean of their ranks.
    """
    methods = list(table)
    if not methods:
        return {}
    scenarios = sorted(set().union(*(table[m].keys() for m in methods)))
    ranks = np.zeros((len(methods), len(scenarios)))
    for j, s in enumerate(scenarios):
        try:
            vals = np.array([float(table[m][s]) for m in methods])
        except KeyError as exc:
            raise ValueError(f"missing cell for scenario {s!r}") from exc
        if np.any(np.isnan(vals)):
            raise ValueError(f"missing value for scenario {s!r}")
        ranks[:, j] = rankdata(vals if lower_is_better else -vals, method="average")
    return {m: float(r) for m, r in zip(methods, ranks.mean(axis=1))}


@dataclass
class EvalReport:
    scenario: str
    prior: str
    optimizer: str
    density: int
    seed: int
    relative_dtw_mean: float
    agent_agent_collisions: int
    agent_obstacle_collisions: int
    wallclock_seconds: float
    outer_rounds: int = 0
    status: str = "ok"
    relative_dtw_per_agent: list = field(default_factory=list)

    def __post_init__(self):
        if self.agent_agent_collisions < 0 or self.agent_obstacle_collisions < 0:
            raise ValueError("collision counts must be non-negative")

    @property
    def method(self) -> str:
        return f"{self.prior}+{self.optimizer}"


CSV_FIELDS = [f.name for f in fields(EvalReport)]
TIMING_FIELD = "wallclock_seconds"


def _csv_value(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return ";".join(repr(float(x)) for x in v)
    return str(v)


def write_reports_csv(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in reports:
            w.writerow([_csv_value(getattr(r, k)) for k in CSV_FIELDS])


def read_reports_csv(path) -> list[EvalReport]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            per = [float(x) for x in row["relative_dtw_per_agent"].split(";") if x]
            out.append(EvalReport(
                row["scenario"], row["prior"], row["optimizer"], int(row["density"]),
                int(row["seed"]), float(row["relative_dtw_mean"]),
                int(row["agent_agent_collisions"]), int(row["agent_obstacle_collisions"]),
                float(row["wallclock_seconds"]), int(row["outer_rounds"]), row["status"], per))
    return out


def aggregate(reports) -> dict:
    """Seed-averaged tables keyed like the result tables: metric -> method -> scenario."""
    ok = [r for r in reports if r.status == "ok"]
    metrics = {"relative_dtw": "relative_dtw_mean",
               "agent_agent_collisions": "agent_agent_collisions",
               "agent_obstacle_collisions": "agent_obstacle_collisions",
               "wallclock_seconds": "wallclock_seconds"}
    out = {}
    for name, attr in metrics.items():
        cells: dict = {}
        for r in ok:
            key = f"{r.scenario}@{r.density}"
            cells.setdefault(r.method, {}).setdefault(key, []).append(getattr(r, attr))
        out[name] = {m: {k: float(np.mean(v)) for k, v in sorted(c.items())}
                     for m, c in sorted(cells.items())}
    ranks = {}
    for name in ("relative_dtw", "agent_agent_collisions", "agent_obstacle_collisions"):
        table = {m: v for m, v in out[name].items() if not m.startswith("linear")}
        try:
            ranks[name] = rank_methods(table)
        except ValueError:
            ranks[name] = {}
    out["average_rank"] = ranks
    return out


def write_aggregate_json(path, reports) -> dict:
    agg = aggregate(reports)
    Path(path).write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")
    return agg


def report_row(report: EvalReport) -> dict:
    return asdict(report)
