"""Acceptance criteria, one test each, each printing a PASS/FAIL line."""
import time

import numpy as np
from scipy.optimize import minimize

from conftest import ACCEPTANCE_LINES
from crowdprior.energy import EnergyParams, PriorTargets, Priors
from crowdprior.experiment import (ExperimentConfig, cmd_evaluate, cmd_generate, cmd_train)
from crowdprior.geometry import count_collisions, segment_collision, segment_obstacle_collision
from crowdprior.gp import fit, log_marginal_likelihood, predict
from crowdprior.metrics import dtw
from crowdprior.nn import FEATURE_DIM, MlpConfig, MlpPrior, TrainConfig, train
from crowdprior.optimizers import (UksConfig, alternate_optimize, mpa_min_kinetic,
                                   mpa_min_maxvel, mpa_min_prior, mpa_min_tracker, uks_solve,
                                   uks_transition)
from oracles import dtw_exhaustive, sampled_pair_distances, sampled_rect_distances
from test_cli import results_without_timing, tiny_config
from test_geometry import head_on_fixture, oracle_pair_events
from test_gp import THETA, oracle_posterior, random_problem
from test_nn import TOY, copy_task, finite_difference_check
from test_optimizers import (LinearGp, argmin, gap_problem, prior_residuals, scene, tiny_mlp,
                             uks_reference)

GP_BEARING = ("gp", "gp-fed-nn", "lincomb")

# desk-scale end-to-end run: 30 training runs and 5 held-out seeds
DESK = {"scenarios": ["bottleneck-evacuation"], "n_runs": 35, "split": [6, 1],
        "mask_fraction": 0.3, "outer_iters": 5,
        "gp": {"max_points": 1000, "optimizer_restarts": 2},
        "nn": {"width": 64, "dropout": 0.0,
               "branch_widths": {"desired": 32, "distance": 32, "velocity": 32, "gp_mean": 8,
                                 "gp_std": 8}},
        "nn_train": {"max_epochs": 60, "early_stop_patience": 8}, "nn_max_samples": 50000}


def verdict(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def test_criterion_01_mpa_node_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = {"tracker": 0.0, "kinetic": 0.0, "prior": 0.0, "maxvel": 0.0}
    stationarity = 0.0
    for _ in range(100):
        n0, n1, o = rng.normal(0, 3, (3, 2))
        F = rng.normal(0, 2, 2)
        rho, u = rng.uniform(0.1, 5), rng.uniform(0, 3)
        lam, c = rng.uniform(0.05, 200), rng.uniform(0.01, 10)

        ref = argmin(lambda x: u * np.sum((x - o) ** 2) + rho / 2 * np.sum((x - n0) ** 2), n0)
        worst["tracker"] = max(worst["tracker"],
                               np.abs(mpa_min_tracker(n0, o, u, rho) - ref).max())

        def split(z, w):
            return w(z) + rho / 2 * (np.sum((z[:2] - n0) ** 2) + np.sum((z[2:] - n1) ** 2))

        got = np.concatenate(mpa_min_kinetic(n0, n1, c, rho))
        ref = argmin(lambda z: split(z, lambda q: c * np.sum((q[2:] - q[:2]) ** 2)),
                     np.concatenate([n0, n1]))
        worst["kinetic"] = max(worst["kinetic"], np.abs(got - ref).max())

        a, b = mpa_min_prior(n0, n1, F, lam, rho)
        ref = argmin(lambda z: split(z, lambda q: lam * np.sum((q[2:] - q[:2] - F) ** 2)),
                     np.concatenate([a, b]) + rng.normal(0, 0.5, 4))
        worst["prior"] = max(worst["prior"], np.abs(np.concatenate([a, b]) - ref).max())
        stationarity = max(stationarity, *(np.abs(r).max()
                                           for r in prior_residuals(a, b, n0, n1, F, lam, rho)))

        cap = 2.6 * 1.5
        con = {"type": "ineq", "fun": lambda z: cap ** 2 - np.sum((z[2:] - z[:2]) ** 2)}
        mid = (n0 + n1) / 2
        ref = minimize(lambda z: split(z, lambda q: 0.0), np.concatenate([mid, mid]),
                       method="SLSQP", constraints=[con],
                       options={"ftol": 1e-15, "maxiter": 500}).x
        got = np.concatenate(mpa_min_maxvel(n0, n1, 2.6, 1.5, rho))
        worst["maxvel"] = max(worst["maxvel"], np.abs(got - ref).max())
    secs = time.perf_counter() - start
    ok = max(worst.values()) < 1e-6 and stationarity < 1e-9 and secs < 10
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(1, ok, f"max error {detail}; stationarity {stationarity:.1e}; {secs:.1f} s")


def test_criterion_02_uks_linear_equivalence():
    start = time.perf_counter()
    p = EnergyParams()
    rng = np.random.default_rng(102)
    worst = 0.0
    for k in range(20):
        _, obs, mask, x0, _ = gap_problem(1000 + k, frames=50)
        targets = PriorTargets(np.tile(rng.normal(0, 0.8, 2), (49, 1)), p.lam * p.dt ** 2)
        for limiter in (False, True):
            cfg = UksConfig(use_limiter=limiter)
            x = uks_solve(x0[0], obs[0], mask[0], targets, p, cfg).x
            ref = uks_reference(x0[0], obs[0], mask[0], targets, p, cfg, limiter)
            worst = max(worst, np.abs(x - ref).max())
    secs = time.perf_counter() - start
    verdict(2, worst < 1e-6 and secs < 30, f"max deviation {worst:.1e} m; {secs:.1f} s")


def test_criterion_03_parameter_fidelity():
    sigma = 1.0 / np.sqrt(108.0 * 1.5 ** 2)
    p = EnergyParams.from_sigma_nn(sigma, dt=1.5)
    mean, cov = uks_transition(np.zeros(2), np.array([1.0, 0.0]), p, use_limiter=False)
    shrink = mean[0] / p.dt
    eps = np.finfo(float).eps
    err_lam = abs(p.lam - 108.0) / 108.0
    err_shrink = abs(shrink - 108 / 109) / (108 / 109)
    err_q = np.abs(cov - np.eye(2) / 218).max() * 218
    ok = max(err_lam, err_shrink, err_q) <= 4 * eps
    verdict(3, ok, f"lambda {float(p.lam)!r}, shrink rel err {err_shrink:.1e}, "
                   f"Q rel err {err_q:.1e}")


def test_criterion_04_collision_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(104)
    mismatches = checked = 0
    for _ in range(1000):
        pa0, pa1, pb0, pb1 = rng.uniform(-3, 3, size=(4, 2))
        ra, rb = rng.uniform(0.1, 1.0, size=2)
        dmin = sampled_pair_distances(pa0, pa1, pb0, pb1).min()
        if abs(dmin - (ra + rb)) >= 1e-4:
            checked += 1
            mismatches += segment_collision(pa0, pa1, pb0, pb1, ra, rb) != (dmin < ra + rb)
        lo = rng.uniform(-2, 1, size=2)
        rect = np.concatenate([lo, lo + rng.uniform(0.1, 2, size=2)])
        p0, p1 = rng.uniform(-4, 4, size=(2, 2))
        r = rng.uniform(0.1, 1.0)
        dmin = sampled_rect_distances(p0, p1, rect).min()
        if abs(dmin - r) >= 1e-4:
            checked += 1
            mismatches += segment_obstacle_collision(p0, p1, r, rect) != (dmin < r)
    pts, radii = head_on_fixture()
    got = count_collisions(pts, radii)["agent_agent"]
    want = oracle_pair_events(pts, radii)
    secs = time.perf_counter() - start
    ok = mismatches == 0 and got == want and secs < 60
    verdict(4, ok, f"{mismatches} mismatches in {checked} checked cases; head-on {got} vs "
                   f"oracle {want}; {secs:.1f} s")


def test_criterion_05_dtw_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(105)
    worst = 0.0
    for _ in range(500):
        a = rng.normal(size=(rng.integers(1, 7), 2))
        b = rng.normal(size=(rng.integers(1, 7), 2))
        worst = max(worst, abs(dtw(a, b) - dtw_exhaustive(a, b)))
    secs = time.perf_counter() - start
    verdict(5, worst <= 1e-10 and secs < 10, f"max difference {worst:.1e}; {secs:.1f} s")


def test_criterion_06_gp():
    pred = 0.0
    for n in (3, 17, 50):
        x, y = random_problem(n, n)
        model = fit(x, y, hyperparameters=THETA)
        q = np.random.default_rng(1).uniform(0, 10, size=(7, 3))
        mean, std = predict(model, q)
        ref_mean, ref_std = oracle_posterior(model, q)
        pred = max(pred, np.abs(mean - ref_mean).max(), np.abs(std - ref_std).max())
    grad = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        x, yv = rng.normal(size=(10, 3)), rng.normal(size=10)
        theta = rng.uniform(-1, 1, 5)
        theta[-1] = rng.uniform(-4, -1)
        g = log_marginal_likelihood(x, yv, theta)[1]
        h = 1e-5
        fd = np.array([(log_marginal_likelihood(x, yv, theta + h * e, False)
                        - log_marginal_likelihood(x, yv, theta - h * e, False)) / (2 * h)
                       for e in np.eye(5)])
        grad = max(grad, np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-8)))
    rng = np.random.default_rng(6)
    x = rng.uniform(0, 10, size=(30, 3))
    const = np.tile([1.0, 0.0], (30, 1))
    field_err = np.abs(predict(fit(x, const, optimizer_restarts=2, seed=0), x)[0] - const).max()
    ok = pred < 1e-8 and grad < 1e-4 and field_err < 1e-6
    verdict(6, ok, f"predict {pred:.1e}, gradient rel {grad:.1e}, constant field {field_err:.1e}")


def test_criterion_07_nn():
    fd = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        gp_fed = bool(seed % 2)
        model = MlpPrior(MlpConfig(**TOY, gp_fed=gp_fed, clamp=50.0), seed=seed)
        x = rng.normal(size=(5, model.config.input_dim))
        y = rng.normal(size=(5, 2))
        fd = max(fd, finite_difference_check(model, x, y, 40, rng))
    x, y = copy_task(2000, 0)
    widths = {"desired": 16, "distance": 8, "velocity": 8, "gp_mean": 4, "gp_std": 4}
    model = MlpPrior(MlpConfig(width=32, depth=3, merge_depth=2, branch_widths=widths,
                               dropout=0.0), seed=0)
    val = min(train(model, x, y, TrainConfig(lr=1e-4, max_epochs=200,
                                             early_stop_patience=10)).val_loss)
    loud = MlpPrior(MlpConfig(**TOY), seed=3)
    for k in loud.params:
        loud.params[k] *= 4.0
    rng = np.random.default_rng(4)
    peak = max(float(np.abs(loud.forward(rng.normal(0, 50, size=(10_000, FEATURE_DIM)))).max())
               for _ in range(10))
    ok = fd < 1e-3 and val < 1e-3 and peak <= loud.config.clamp
    verdict(7, ok, f"backprop rel {fd:.1e}, copy-task val MSE {val:.1e}, "
                   f"max |output| {peak:.3f} over 1e5 passes")


def test_criterion_08_end_to_end_trends(tmp_path):
    cfg = ExperimentConfig.from_dict(dict(DESK, out=str(tmp_path))).validate()
    start = time.perf_counter()
    cmd_generate(cfg)
    cmd_train(cfg)
    reports = cmd_evaluate(cfg)
    secs = time.perf_counter() - start
    failed = [r for r in reports if r.status != "ok"]
    dtw_mean, obst, clock = {}, {}, {}
    for r in reports:
        dtw_mean.setdefault(r.method, []).append(r.relative_dtw_mean)
        obst.setdefault(r.method, []).append(r.agent_obstacle_collisions)
        clock.setdefault(r.optimizer, []).append(r.wallclock_seconds)
    dtw_mean = {m: float(np.mean(v)) for m, v in dtw_mean.items()}
    obst = {m: float(np.mean(v)) for m, v in obst.items()}
    base = dtw_mean["linear+none"]
    beats = {m: v < base for m, v in dtw_mean.items() if m != "linear+none"}
    a = all(beats.values())
    b = all(obst[f"{p}+{o}"] < obst[f"nn+{o}"] for p in GP_BEARING for o in cfg.optimizers)
    c = sum(clock["uks"]) < sum(clock["mpa"])
    for m in sorted(dtw_mean):
        print(f"  {m:22s} relative DTW {dtw_mean[m]:7.3f}  obstacle collisions {obst[m]:6.2f}")
    ok = a and b and c and secs < 1800 and not failed
    verdict(8, ok, f"(a) {sum(beats.values())}/{len(beats)} methods beat linear "
                   f"({base:.2f}); (b) {'holds' if b else 'fails'}; (c) uks "
                   f"{sum(clock['uks']):.0f} s vs mpa {sum(clock['mpa']):.0f} s; "
                   f"{len(failed)} failed cells; runtime {secs:.0f} s")


def shifted_fixture(seed):
    truth, obs, mask, x0, _ = gap_problem(seed, n=3)
    return truth + 100.0, obs + 100.0, mask, x0 + 100.0


def test_criterion_09_outer_loop_convergence():
    gp_change = 0.0
    worst_rise = -np.inf
    for k in range(10):
        truth, obs, mask, x0 = shifted_fixture(900 + k)
        res = alternate_optimize(x0, obs, mask, Priors(gp=LinearGp()), scene(truth),
                                 EnergyParams(prior_kind="gp"), "mpa", 5, tol=0.0)
        gp_change = max(gp_change, max(h.max_change for h in res.history[1:]))
        priors = Priors(gp=LinearGp(), nn=tiny_mlp(k), gp_fed_nn=tiny_mlp(k, gp_fed=True))
        kind = ("nn", "lincomb", "gp-fed-nn")[k % 3]
        res = alternate_optimize(x0, obs, mask, priors, scene(truth),
                                 EnergyParams(prior_kind=kind), "mpa", 5, tol=0.0)
        for h in res.history:
            worst_rise = max(worst_rise, (h.energy_after - h.energy_before)
                             / max(1.0, h.energy_before))
    ok = gp_change < 1e-9 and worst_rise <= 1e-6
    verdict(9, ok, f"pure GP max change after round 1 {gp_change:.1e} m; worst relative "
                   f"energy change within a round {worst_rise:+.1e}")


def test_criterion_10_determinism(tmp_path):
    cfg_path = tiny_config(tmp_path)
    cfg = ExperimentConfig.load(cfg_path)
    cmd_generate(cfg)
    cmd_train(cfg)
    cmd_evaluate(cfg)
    first = results_without_timing(tmp_path / "out")
    cmd_evaluate(cfg)
    second = results_without_timing(tmp_path / "out")
    verdict(10, first == second, f"{len(first) - 1} result rows compared, "
                                 f"{'identical' if first == second else 'different'}")
