"""Command-line entry point: ``pessilab {verify,train,sweep,eval}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .errorlab import CertificateFailure, verify_mdp
from .harness import (
    ConfigError,
    ExperimentConfig,
    RunFailure,
    evaluate_checkpoint,
    parse_seeds,
    run_experiment,
    sweep,
)
from .mdp import MdpSpec

EXIT_OK, EXIT_RUN_FAILURE, EXIT_CONFIG = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pessilab", description="Pessimistic actor-critic lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("verify", help="error-operator certificates on a tabular MDP")
    p.add_argument("--mdp", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=1000)

    p = sub.add_parser("train", help="run one training experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--adjuster")
    p.add_argument("--replay-ratio", type=int)
    p.add_argument("--validation-ratio", type=float)
    p.add_argument("--steps", type=int)

    p = sub.add_parser("sweep", help="run a grid of experiments over seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True)
    p.add_argument("--values", required=True)
    p.add_argument("--seeds", default="1..10")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint greedily")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _train_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["output"] = args.out
    if args.adjuster is not None:
        changes["adjuster.name"] = args.adjuster
    if args.replay_ratio is not None:
        changes["agent.replay_ratio"] = args.replay_ratio
    if args.validation_ratio is not None:
        changes["validation_ratio"] = args.validation_ratio
    if args.steps is not None:
        changes["total_steps"] = args.steps
    return cfg.replace(**changes) if changes else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "verify":
            mdp = MdpSpec.load(args.mdp)
            report = verify_mdp(mdp, seed=args.seed, trials=args.trials)
            print(json.dumps(report, indent=2))
        elif args.command == "train":
            cfg = _train_config(args)
            rows = run_experiment(cfg)
            last = rows[-1].eval_return if rows else float("nan")
            print(json.dumps({"rows": len(rows), "final_eval_return": last, "output": cfg.output}))
        elif args.command == "sweep":
            cfg = ExperimentConfig.load(args.config)
            values = [v.strip() for v in args.values.split(",") if v.strip()]
            summary = sweep(cfg, args.axis, values, parse_seeds(args.seeds), args.out)
            for entry in summary:
                print(json.dumps({k: entry[k] for k in ("arm", "value", "n_seeds", "mean", "ci", "n_failed")}))
            if any(entry["n_failed"] for entry in summary):
                return EXIT_RUN_FAILURE
        else:
            print(json.dumps({"mean_return": evaluate_checkpoint(args.checkpoint, args.episodes, args.seed)}))
    except (ConfigError, ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"pessilab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RunFailure, CertificateFailure) as exc:
        print(f"pessilab: run failed: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
