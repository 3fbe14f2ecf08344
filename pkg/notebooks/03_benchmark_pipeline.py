"""
The benchmark pipeline end to end
=================================

generate -> train -> evaluate -> report on a small hallway configuration,
driven through the command-line entry point.  Outputs land in a temporary
directory.  Run with ``python3 notebooks/03_benchmark_pipeline.py``.
"""

# %%
import json
import tempfile
from pathlib import Path

from crowdprior.cli import main

out = Path(tempfile.mkdtemp(prefix="crowdprior_"))
cfg = {"scenarios": ["hallway-two-way"], "n_runs": 8, "out": str(out), "outer_iters": 2,
       "gp": {"max_points": 300, "optimizer_restarts": 1},
       "nn": {"width": 16, "dropout": 0.0,
              "branch_widths": {"desired": 8, "distance": 8, "velocity": 8, "gp_mean": 4,
                                "gp_std": 4}},
       "nn_train": {"max_epochs": 5}, "nn_max_samples": 3000}
path = out / "config.json"
path.write_text(json.dumps(cfg, indent=2))

# %%
for cmd in ("generate", "train"):
    assert main([cmd, "--config", str(path)]) == 0
print(json.loads((out / "models" / "manifest.json").read_text()))

# %%
# One held-out run: the linear baseline plus two priors under two optimizers.
code = main(["evaluate", "--config", str(path), "--prior", "gp", "--prior", "lincomb",
             "--optimizer", "uks", "--optimizer", "direct"])
print("evaluate exit code", code)
assert main(["report", "--config", str(path)]) == 0

# %%
summary = json.loads((out / "results" / "summary.json").read_text())
for method, cells in summary["relative_dtw"].items():
    print(f"{method:16s} relative DTW {list(cells.values())[0]:6.2f}%")
print("average ranks", summary["average_rank"]["relative_dtw"])
print((out / "results" / "ranks.csv").read_text())
