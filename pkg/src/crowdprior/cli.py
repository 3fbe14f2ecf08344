"""Command line: ``python -m crowdprior {generate,train,evaluate,report} [flags]``.

Exit codes: 0 success, 1 configuration or input error, 2 some grid cells failed.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .energy import PRIOR_KINDS
from .experiment import (ConfigError, ExperimentConfig, cmd_evaluate, cmd_generate, cmd_report,
                         cmd_train)
from .optimizers import OPTIMIZERS

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON experiment config")
    common.add_argument("--scenario", action="append", metavar="NAME",
                        help="built-in scenario name or scenario JSON file (repeatable)")
    common.add_argument("--prior", action="append", choices=PRIOR_KINDS)
    common.add_argument("--optimizer", action="append", choices=OPTIMIZERS)
    common.add_argument("--mask-fraction", type=float, metavar="F")
    common.add_argument("--outer-iters", type=int, metavar="N")
    common.add_argument("--density", type=int, action="append", metavar="N",
                        help="agent count (repeatable)")
    common.add_argument("--seed", type=int, metavar="N")
    common.add_argument("--out", metavar="DIR")
    common.add_argument("--jobs", type=int, metavar="N", help="parallel grid cells")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="crowdprior", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="simulate ground-truth datasets")
    sub.add_parser("train", parents=[common], help="fit GP and NN priors")
    sub.add_parser("evaluate", parents=[common], help="run the prior x optimizer grid")
    sub.add_parser("report", parents=[common], help="rebuild tables from results.csv")
    return p


def config_from_args(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {
        "scenarios": args.scenario, "priors": args.prior, "optimizers": args.optimizer,
        "mask_fraction": args.mask_fraction, "outer_iters": args.outer_iters,
        "densities": args.density, "seed": args.seed, "out": args.out, "jobs": args.jobs,
    }
    for k, v in overrides.items():
        if v is not None:
            setattr(cfg, k, v)
    return cfg.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(args)
        if args.command == "generate":
            paths = cmd_generate(cfg)
            print(f"wrote {len(paths)} dataset file(s) under {cfg.out}")
        elif args.command == "train":
            manifest = cmd_train(cfg, verbose=args.verbose)
            print(f"trained {len(manifest['scenarios'])} GP model(s)"
                  + "".join(f", {k} (sigma_nn={manifest[k]['sigma_nn']:.4f})"
                            for k in ("nn", "gp_fed_nn") if k in manifest))
        elif args.command == "evaluate":
            reports = cmd_evaluate(cfg)
            failed = [r for r in reports if r.status != "ok"]
            print(f"evaluated {len(reports)} cell(s), {len(failed)} failed; "
                  f"results in {cfg.out}/results")
            if failed:
                return EXIT_PARTIAL
        else:
            cmd_report(cfg)
            print(f"tables written to {cfg.out}/results")
    except (ConfigError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
