"""Experiment pipeline behind the command line: generate, train, evaluate, report.

Output layout under ``out``::

    scenarios/<scenario>_n<density>.json
    data/<scenario>/n<density>/run_<seed>.csv
    models/gp_<scenario>.npz, models/nn.mlp, models/gp_fed_nn.mlp, models/manifest.json
    results/results.csv, results/summary.json, results/ranks.csv, results/figures/*.csv
"""
from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import gp as gp_mod
from .energy import PRIOR_KINDS, EnergyParams, Priors
from .geometry import Scenario, count_collisions, load_scenario, save_scenario
from .metrics import (EvalReport, aggregate, read_reports_csv, relative_dtw,
                      write_aggregate_json, write_reports_csv)
from .nn import MlpConfig, MlpPrior, TrainConfig, build_observations, stack_features, train
from .optimizers import OPTIMIZERS, alternate_optimize
from .scenarios import BUILTIN, get_scenario
from .simulator import (SocialForceParams, linear_init, mask_segment, read_dataset, simulate,
                        split_train_test, write_dataset)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    scenarios: list = field(default_factory=lambda: list(BUILTIN))
    seed: int = 0
    n_runs: int = 7                  # simulated runs per (scenario, density)
    split: tuple = (6, 1)
    mask_fraction: float = 0.3
    priors: list = field(default_factory=lambda: list(PRIOR_KINDS))
    optimizers: list = field(default_factory=lambda: list(OPTIMIZERS))
    outer_iters: int = 5
    outer_tol: float = 1e-3
    densities: list = field(default_factory=list)   # empty: each scenario's default count
    train_density: int | None = None
    energy: dict = field(default_factory=dict)     # EnergyParams overrides; lam may be "auto"
    anchor_observed: bool = True
    gp: dict = field(default_factory=lambda: {"max_points": 1000, "optimizer_restarts": 5})
    nn: dict = field(default_factory=dict)         # MlpConfig overrides
    nn_train: dict = field(default_factory=dict)   # TrainConfig overrides
    nn_max_samples: int = 50000
    out: str = "runs"
    jobs: int = 1

    def validate(self) -> "ExperimentConfig":
        if not self.scenarios:
            raise ConfigError("at least one scenario is required")
        if not self.priors or not self.optimizers:
            raise ConfigError("at least one prior and one optimizer are required")
        bad = [p for p in self.priors if p not in PRIOR_KINDS]
        if bad:
            raise ConfigError(f"unknown prior(s) {bad}; choose from {list(PRIOR_KINDS)}")
        bad = [o for o in self.optimizers if o not in OPTIMIZERS]
        if bad:
            raise ConfigError(f"unknown optimizer(s) {bad}; choose from {list(OPTIMIZERS)}")
        if not 0 < self.mask_fraction < 1:
            raise ConfigError("mask_fraction must lie in (0, 1)")
        if self.outer_iters < 1 or self.n_runs < 1 or self.jobs < 1:
            raise ConfigError("outer_iters, n_runs and jobs must be positive")
        if any(int(d) < 1 for d in self.densities):
            raise ConfigError("densities must be positive agent counts")
        for s in self.scenarios:
            if s not in BUILTIN and not str(s).endswith(".json"):
                raise ConfigError(f"unknown scenario {s!r}")
        unknown = set(self.energy) - {f.name for f in fields(EnergyParams)} - {"sigma_nn"}
        if unknown:
            raise ConfigError(f"unknown energy parameter(s) {sorted(unknown)}")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config key(s) {sorted(unknown)}")
        d = dict(d)
        if "split" in d:
            d["split"] = tuple(d["split"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d


# --------------------------------------------------------------------------
# helpers

def _scenario(name: str, density: int | None) -> Scenario:
    if str(name).endswith(".json"):
        sc = load_scenario(name)
        if density is not None and density != len(sc.agents):
            raise ConfigError(f"{name}: density sweeps need a built-in scenario")
        return sc
    return get_scenario(name, density)


def scenario_key(name: str) -> str:
    return Path(name).stem if str(name).endswith(".json") else name


def _densities(cfg: ExperimentConfig, name: str) -> list[int]:
    if cfg.densities:
        return [int(d) for d in cfg.densities]
    return [len(_scenario(name, None).agents)]


def _train_density(cfg: ExperimentConfig, name: str) -> int:
    if cfg.train_density is not None:
        return int(cfg.train_density)
    return len(_scenario(name, None).agents)


def run_seeds(cfg: ExperimentConfig) -> list[int]:
    return [cfg.seed * 1000 + r for r in range(cfg.n_runs)]


def _data_dir(out, name, density) -> Path:
    return Path(out) / "data" / scenario_key(name) / f"n{density}"


def _scenario_path(out, name, density) -> Path:
    return Path(out) / "scenarios" / f"{scenario_key(name)}_n{density}.json"


def split_runs(cfg: ExperimentConfig, seeds=None):
    seeds = run_seeds(cfg) if seeds is None else seeds
    if len(seeds) == 1:
        return list(seeds), list(seeds)
    return split_train_test(seeds, cfg.split, cfg.seed)


def stack(trajs) -> np.ndarray:
    return np.stack([t.points for t in trajs]) if trajs else np.zeros((0, 0, 2))


# --------------------------------------------------------------------------
# generate

def cmd_generate(cfg: ExperimentConfig) -> list[Path]:
    """Simulate ``n_runs`` runs for every (scenario, density)."""
    cfg.validate()
    params = SocialForceParams()
    written = []
    for name in cfg.scenarios:
        dens = sorted(set(_densities(cfg, name)) | {_train_density(cfg, name)})
        for d in dens:
            sc = _scenario(name, d)
            sp = _scenario_path(cfg.out, name, d)
            sp.parent.mkdir(parents=True, exist_ok=True)
            save_scenario(sc, sp)
            ddir = _data_dir(cfg.out, name, d)
            ddir.mkdir(parents=True, exist_ok=True)
            for s in run_seeds(cfg):
                trajs = simulate(sc, params, seed=s)
                path = ddir / f"run_{s}.csv"
                write_dataset(path, trajs, sc.name, s, len(sc.agents))
                written.append(path)
                log.info("wrote %s", path)
    return written


def _load_run(out, name, density, seed):
    path = _data_dir(out, name, density) / f"run_{seed}.csv"
    if not path.exists():
        raise FileNotFoundError(f"missing dataset {path}; run 'generate' first")
    return read_dataset(path)


def _load_scenario_file(out, name, density) -> Scenario:
    path = _scenario_path(out, name, density)
    if not path.exists():
        raise FileNotFoundError(f"missing scenario file {path}; run 'generate' first")
    return load_scenario(path)


# --------------------------------------------------------------------------
# train

def gp_training_data(runs, dt):
    """``(x, y, t)`` inputs and forward-difference velocities from ground-truth runs."""
    pts, vel = [], []
    for x in runs:
        n, f, _ = x.shape
        t = np.broadcast_to(np.arange(f - 1) * dt, (n, f - 1))
        pts.append(np.concatenate([x[:, :-1].reshape(-1, 2), t.reshape(-1, 1)], axis=1))
        vel.append((np.diff(x, axis=1) / dt).reshape(-1, 2))
    return np.concatenate(pts), np.concatenate(vel)


def nn_training_data(runs, scenario: Scenario, dt, rng, max_samples=None, gp=None,
                     desired_speed=1.3):
    """Features at frame ``t`` and the velocity over ``t -> t+1``.

    Frames are drawn at random (without replacement) until ``max_samples``
    agent samples are collected.  Features are stored as float32.
    """
    frames = [(r, t) for r, x in enumerate(runs) for t in range(x.shape[1] - 1)]
    order = rng.permutation(len(frames))
    feats, targets = [], []
    count = 0
    for k in order:
        r, t = frames[k]
        x = runs[r]
        prev = x[:, t - 1] if t > 0 else x[:, 0]
        obs = build_observations(x[:, t], prev, scenario, scenario.goals[:len(x)], dt,
                                 desired_speed, gp=gp, time=t * dt)
        feats.append(stack_features(obs, (x[:, t] - prev) / dt).astype(np.float32))
        targets.append((x[:, t + 1] - x[:, t]) / dt)
        count += len(x)
        if max_samples is not None and count >= max_samples:
            break
    f = np.concatenate(feats)
    y = np.concatenate(targets)
    if max_samples is not None:
        f, y = f[:max_samples], y[:max_samples]
    return f, y


def _gp_path(out, name):
    return Path(out) / "models" / f"gp_{scenario_key(name)}.npz"


def cmd_train(cfg: ExperimentConfig, verbose: bool = False) -> dict:
    """Fit one GP per scenario and the pooled NN priors on the training runs."""
    cfg.validate()
    mdir = Path(cfg.out) / "models"
    mdir.mkdir(parents=True, exist_ok=True)
    train_seeds, _ = split_runs(cfg)
    if not train_seeds:
        raise ConfigError("training split is empty")
    need_nn = any(p in ("nn", "lincomb") for p in cfg.priors)
    need_fed = "gp-fed-nn" in cfg.priors
    manifest = {"scenarios": {}, "train_seeds": train_seeds}
    gps, plain, fed = {}, [], []
    rng = np.random.default_rng(cfg.seed)
    per_scenario = None if cfg.nn_max_samples is None else \
        int(np.ceil(cfg.nn_max_samples / len(cfg.scenarios)))
    for name in cfg.scenarios:
        d = _train_density(cfg, name)
        sc = _load_scenario_file(cfg.out, name, d)
        runs, dt = [], None
        for s in train_seeds:
            meta, trajs = _load_run(cfg.out, name, d, s)
            runs.append(stack(trajs))
            dt = meta["dt"]
        pts, vel = gp_training_data(runs, dt)
        model = gp_mod.fit(pts, vel, seed=cfg.seed, **cfg.gp)
        model.save(_gp_path(cfg.out, name))
        gps[name] = model
        manifest["scenarios"][scenario_key(name)] = {"dt": dt, "density": d,
                                                     "gp_points": model.n_train}
        if need_nn:
            plain.append(nn_training_data(runs, sc, dt, np.random.default_rng(rng.integers(2**32)),
                                          per_scenario))
        if need_fed:
            fed.append(nn_training_data(runs, sc, dt, np.random.default_rng(rng.integers(2**32)),
                                        per_scenario, gp=model))
        log.info("trained GP for %s", name)
    for tag, data, gp_fed in (("nn", plain, False), ("gp_fed_nn", fed, True)):
        if not data:
            continue
        x = np.concatenate([a for a, _ in data])
        y = np.concatenate([b for _, b in data])
        mcfg = MlpConfig(**{**cfg.nn, "gp_fed": gp_fed})
        model = MlpPrior(mcfg, seed=cfg.seed)
        res = train(model, x, y, TrainConfig(**{"seed": cfg.seed, **cfg.nn_train}), verbose=verbose)
        model.save(mdir / f"{tag}.mlp")
        manifest[tag] = {"sigma_nn": res.sigma_nn, "best_epoch": res.best_epoch,
                         "samples": int(len(x)), "val_loss": res.val_loss}
        log.info("trained %s: sigma_nn=%.4f", tag, res.sigma_nn)
    (mdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# --------------------------------------------------------------------------
# evaluate

_MODEL_CACHE: dict = {}


def load_priors(out, name) -> Priors:
    key = (str(out), scenario_key(name))
    if key not in _MODEL_CACHE:
        mdir = Path(out) / "models"
        gp_path = _gp_path(out, name)
        pr = Priors(
            gp=gp_mod.GpFlowModel.load(gp_path) if gp_path.exists() else None,
            nn=MlpPrior.load(mdir / "nn.mlp") if (mdir / "nn.mlp").exists() else None,
            gp_fed_nn=MlpPrior.load(mdir / "gp_fed_nn.mlp")
            if (mdir / "gp_fed_nn.mlp").exists() else None)
        _MODEL_CACHE[key] = pr
    return _MODEL_CACHE[key]


def energy_params(cfg: ExperimentConfig, prior: str, priors: Priors, dt: float) -> EnergyParams:
    kw = {k: v for k, v in cfg.energy.items() if k not in ("lam", "sigma_nn")}
    kw.setdefault("dt", dt)
    lam = cfg.energy.get("lam", "auto")
    if "sigma_nn" in cfg.energy:
        lam = 1.0 / (cfg.energy["sigma_nn"] ** 2 * kw["dt"] ** 2)
    if lam == "auto":
        model = priors.gp_fed_nn if prior == "gp-fed-nn" else priors.nn
        if model is not None and model.sigma_nn:
            lam = 1.0 / (model.sigma_nn ** 2 * kw["dt"] ** 2)
        else:
            lam = EnergyParams.lam
    return EnergyParams(lam=float(lam), prior_kind=prior, **kw)


def masked_task(trajs, fraction, seed):
    """Ground truth, observations (NaN where hidden), masks and linear fill."""
    masked = [mask_segment(t, fraction, seed) for t in trajs]
    filled = [linear_init(m) for m in masked]
    return (stack(trajs), stack(masked), np.stack([m.mask for m in masked]), stack(filled))


def _metrics(x, truth, sc: Scenario):
    per = [relative_dtw(x[i], truth[i]) for i in range(len(x))]
    coll = count_collisions(x, sc.radii[:len(x)], sc)
    return per, coll


def evaluate_cell(cfg: ExperimentConfig, name: str, density: int, seed: int,
                  prior: str | None, optimizer: str | None) -> EvalReport:
    """One grid cell; ``prior=None`` gives the linear-interpolation baseline."""
    sc = _load_scenario_file(cfg.out, name, density)
    meta, trajs = _load_run(cfg.out, name, density, seed)
    truth, obs, mask, x0 = masked_task(trajs, cfg.mask_fraction, seed)
    key = scenario_key(name)
    if prior is None:
        per, coll = _metrics(x0, truth, sc)
        return EvalReport(key, "linear", "none", density, seed, float(np.nanmean(per)),
                          coll["agent_agent"], coll["agent_obstacle"], 0.0, 0, "ok", per)
    priors = load_priors(cfg.out, name)
    params = energy_params(cfg, prior, priors, meta["dt"])
    t0 = time.perf_counter()
    res = alternate_optimize(x0, obs, mask, priors, sc, params, optimizer, cfg.outer_iters,
                             cfg.outer_tol, cfg.anchor_observed)
    elapsed = time.perf_counter() - t0
    per, coll = _metrics(res.x, truth, sc)
    return EvalReport(key, prior, optimizer, density, seed, float(np.nanmean(per)),
                      coll["agent_agent"], coll["agent_obstacle"], elapsed, res.rounds, "ok", per)


def _cell_job(args):
    cfg_dict, name, density, seed, prior, optimizer = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    try:
        return evaluate_cell(cfg, name, density, seed, prior, optimizer)
    except Exception as exc:  # recorded per cell, the grid continues
        log.error("cell %s/%s/%s/%s/%s failed: %s", name, density, seed, prior, optimizer, exc)
        return EvalReport(scenario_key(name), prior or "linear", optimizer or "none", density,
                          seed, float("nan"), 0, 0, 0.0, 0, f"failed: {type(exc).__name__}: {exc}")


def grid(cfg: ExperimentConfig):
    _, test_seeds = split_runs(cfg)
    cells = []
    for name in cfg.scenarios:
        for d in _densities(cfg, name):
            for s in test_seeds:
                cells.append((name, d, s, None, None))
                for p in cfg.priors:
                    for o in cfg.optimizers:
                        cells.append((name, d, s, p, o))
    return cells


def cmd_evaluate(cfg: ExperimentConfig) -> list[EvalReport]:
    """Run the full grid and write ``results.csv`` plus the aggregate tables."""
    cfg.validate()
    if not split_runs(cfg)[1]:
        raise ConfigError("test split is empty; increase n_runs")
    cells = grid(cfg)
    jobs = [(cfg.to_dict(),) + c for c in cells]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            reports = list(pool.map(_cell_job, jobs))
    else:
        reports = [_cell_job(j) for j in jobs]
    rdir = Path(cfg.out) / "results"
    rdir.mkdir(parents=True, exist_ok=True)
    write_reports_csv(rdir / "results.csv", reports)
    write_tables(reports, rdir)
    return reports


# --------------------------------------------------------------------------
# report

def write_tables(reports, rdir) -> dict:
    rdir = Path(rdir)
    agg = write_aggregate_json(rdir / "summary.json", reports)
    with open(rdir / "ranks.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        metrics = sorted(agg["average_rank"])
        w.writerow(["method"] + metrics)
        methods = sorted({m for v in agg["average_rank"].values() for m in v})
        for m in methods:
            w.writerow([m] + [repr(agg["average_rank"][k].get(m, float("nan"))) for k in metrics])
    fdir = rdir / "figures"
    fdir.mkdir(exist_ok=True)
    ok = [r for r in reports if r.status == "ok"]
    for metric in ("relative_dtw_mean", "agent_agent_collisions", "agent_obstacle_collisions",
                   "wallclock_seconds"):
        for sc in sorted({r.scenario for r in ok}):
            rows: dict = {}
            for r in ok:
                if r.scenario == sc:
                    rows.setdefault((r.density, r.method), []).append(getattr(r, metric))
            methods = sorted({m for _, m in rows})
            with open(fdir / f"{sc}_{metric}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["density"] + methods)
                for d in sorted({d for d, _ in rows}):
                    w.writerow([d] + [repr(float(np.mean(rows[(d, m)])))
                                      if (d, m) in rows else "" for m in methods])
    return agg


def cmd_report(cfg: ExperimentConfig) -> dict:
    rdir = Path(cfg.out) / "results"
    path = rdir / "results.csv"
    if not path.exists():
        raise FileNotFoundError(f"missing {path}; run 'evaluate' first")
    return write_tables(read_reports_csv(path), rdir)


__all__ = ["ConfigError", "ExperimentConfig", "aggregate", "cmd_evaluate", "cmd_generate",
           "cmd_report", "cmd_train", "evaluate_cell", "masked_task"]
