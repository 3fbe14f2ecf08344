import csv
import json

import pytest

from crowdprior.cli import EXIT_CONFIG, EXIT_OK, EXIT_PARTIAL, main
from crowdprior.geometry import AgentSpec, Rect, Scenario, save_scenario
from crowdprior.metrics import TIMING_FIELD

TINY_NN = {"width": 8, "depth": 3, "merge_depth": 2, "dropout": 0.0,
           "branch_widths": {"desired": 4, "distance": 4, "velocity": 4, "gp_mean": 2,
                             "gp_std": 2}}


def tiny_config(tmp, **extra):
    sc = Scenario("corridor", 24, 12, [Rect(11, 0, 13, 4)],
                  [AgentSpec(0.3, (2, 3 + 2 * k), (22, 9 - 2 * k)) for k in range(3)],
                  n_frames=16)
    save_scenario(sc, tmp / "corridor.json")
    cfg = {"scenarios": [str(tmp / "corridor.json")], "n_runs": 7, "out": str(tmp / "out"),
           "outer_iters": 2, "gp": {"max_points": 100, "optimizer_restarts": 1},
           "nn": TINY_NN, "nn_train": {"max_epochs": 2}, "nn_max_samples": 300}
    cfg.update(extra)
    path = tmp / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def results_without_timing(out):
    with open(out / "results" / "results.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    drop = rows[0].index(TIMING_FIELD)
    return [r[:drop] + r[drop + 1:] for r in rows]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = tiny_config(tmp)
    assert main(["generate", "--config", str(cfg)]) == EXIT_OK
    assert main(["train", "--config", str(cfg)]) == EXIT_OK
    return tmp, cfg


def test_generate_is_deterministic(trained, tmp_path):
    tmp, _ = trained
    cfg = tiny_config(tmp_path)
    assert main(["generate", "--config", str(cfg)]) == EXIT_OK
    for name in ("run_0.csv", "run_3.csv", "run_6.csv"):
        a = (tmp / "out" / "data" / "corridor" / "n3" / name).read_bytes()
        b = (tmp_path / "out" / "data" / "corridor" / "n3" / name).read_bytes()
        assert a == b


def test_train_writes_models(trained):
    tmp, _ = trained
    models = tmp / "out" / "models"
    assert {p.name for p in models.iterdir()} >= {"gp_corridor.npz", "nn.mlp", "gp_fed_nn.mlp",
                                                  "manifest.json"}
    manifest = json.loads((models / "manifest.json").read_text())
    assert manifest["nn"]["sigma_nn"] > 0


def test_evaluate_and_report(trained, capsys):
    tmp, cfg = trained
    args = ["evaluate", "--config", str(cfg), "--prior", "gp", "--prior", "nn",
            "--optimizer", "uks", "--optimizer", "direct"]
    assert main(args) == EXIT_OK
    rows = results_without_timing(tmp / "out")
    # header, then per test seed: linear baseline plus 2 priors x 2 optimizers
    assert len(rows) == 1 + 5
    assert all(r[rows[0].index("status")] == "ok" for r in rows[1:])
    summary = json.loads((tmp / "out" / "results" / "summary.json").read_text())
    assert set(summary["relative_dtw"]) == {"linear+none", "gp+uks", "gp+direct", "nn+uks",
                                            "nn+direct"}
    assert main(["report", "--config", str(cfg)]) == EXIT_OK
    assert (tmp / "out" / "results" / "ranks.csv").exists()
    assert "evaluated 5 cell(s)" in capsys.readouterr().out


def test_evaluate_twice_gives_identical_metrics(trained):
    tmp, cfg = trained
    args = ["evaluate", "--config", str(cfg), "--optimizer", "mpa", "--prior", "lincomb",
            "--prior", "gp-fed-nn"]
    assert main(args) == EXIT_OK
    first = results_without_timing(tmp / "out")
    assert main(args) == EXIT_OK
    assert results_without_timing(tmp / "out") == first


def test_partial_failure_exit_code(tmp_path):
    cfg = tiny_config(tmp_path, priors=["gp"])
    assert main(["generate", "--config", str(cfg)]) == EXIT_OK
    assert main(["train", "--config", str(cfg)]) == EXIT_OK
    # the NN was never trained, so its cells fail while the grid continues
    code = main(["evaluate", "--config", str(cfg), "--prior", "gp", "--prior", "nn",
                 "--optimizer", "uks"])
    assert code == EXIT_PARTIAL
    with open(tmp_path / "out" / "results" / "results.csv", newline="") as fh:
        status = {r["prior"]: r["status"] for r in csv.DictReader(fh)}
    assert status["gp"] == "ok" and status["nn"].startswith("failed")


@pytest.mark.parametrize("argv", [
    ["evaluate", "--mask-fraction", "1.5"],
    ["evaluate", "--scenario", "no-such-scenario"],
    ["generate", "--outer-iters", "0"],
])
def test_config_errors_exit_1(argv, tmp_path):
    assert main(argv + ["--out", str(tmp_path)]) == EXIT_CONFIG


def test_missing_inputs_exit_1(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    assert main(["train", "--config", str(cfg)]) == EXIT_CONFIG
    assert main(["report", "--config", str(cfg)]) == EXIT_CONFIG
    assert "generate" in capsys.readouterr().err


def test_empty_test_split_is_config_error(trained):
    tmp, cfg = trained
    data = json.loads(cfg.read_text())
    data["n_runs"] = 3
    small = tmp / "small.json"
    small.write_text(json.dumps(data))
    assert main(["evaluate", "--config", str(small)]) == EXIT_CONFIG


def test_bad_config_file(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["generate", "--config", str(bad)]) == EXIT_CONFIG
    bad.write_text(json.dumps({"unknown_key": 1}))
    assert main(["generate", "--config", str(bad)]) == EXIT_CONFIG


def test_unknown_choice_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["evaluate", "--prior", "svm"])
    assert exc.value.code == 2
