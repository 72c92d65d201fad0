"""Command-line verbs: train, compare, toy-check, calibrate."""
from __future__ import annotations

import argparse
import json
import logging
from dataclasses import asdict, replace
from pathlib import Path
from typing import List, Optional, Sequence

from retention.config import Algorithm, ExperimentConfig, apply_overrides, load_json
from retention.core import ConfigError, LogFormatError, NumericalAbort
from retention.harness import OUTPUT_ROOT, compare, run, toy_mdp_check
from retention.simenv import calibrate_from_logs

logger = logging.getLogger("retention.cli")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_ACCEPTANCE = 4

TOY_GAMMAS = (0.0, 0.9, 0.95)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON experiment config (defaults apply to omitted keys)")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--episodes", type=int)
    parser.add_argument("--window", type=int, help="number of final episodes averaged into the result")
    parser.add_argument("--output-dir")
    parser.add_argument("--workers", type=int)
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
        help="override one config value (JSON-parsed); repeatable, applied last",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="app.py", description="Retention-oriented ranking-weight RL experiments.")
    verbs = parser.add_subparsers(dest="verb", required=True)

    train = verbs.add_parser("train", help="train and evaluate one algorithm")
    train.add_argument("--algorithm", choices=[a.value for a in Algorithm])
    _add_config_flags(train)

    comp = verbs.add_parser("compare", help="run several algorithms over several seeds and tabulate")
    comp.add_argument(
        "--algorithms", nargs="+", choices=[a.value for a in Algorithm], default=[a.value for a in Algorithm]
    )
    comp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    _add_config_flags(comp)

    toy = verbs.add_parser("toy-check", help="verify the retention critic on the two-session chain")
    toy.add_argument("--gamma", type=float, action="append", help="discount to check; repeatable")
    toy.add_argument("--seed", type=int, default=0)

    cal = verbs.add_parser("calibrate", help="fit simulator leave/return parameters to a session log CSV")
    cal.add_argument("log", type=Path)
    cal.add_argument("--return-days", type=int, default=10)
    cal.add_argument("--output", type=Path, help="write the sim overrides here as a config fragment")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """defaults < --config file < dedicated flags < --set overrides."""
    config = load_json(args.config) if args.config else ExperimentConfig()
    flags = {
        "algorithm": getattr(args, "algorithm", None),
        "seed": args.seed,
        "episodes": args.episodes,
        "window": args.window,
        "output_dir": args.output_dir,
        "workers": args.workers,
    }
    updates = {k: v for k, v in flags.items() if v is not None}
    if "algorithm" in updates:
        updates["algorithm"] = Algorithm(updates["algorithm"])
    config = replace(config, **updates)
    return apply_overrides(config, args.overrides).validate()


def cmd_train(args: argparse.Namespace) -> int:
    row = run(resolve_config(args))
    print(json.dumps(asdict(row), indent=2))
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    base = resolve_config(args)
    root = Path(base.output_dir) if base.output_dir else Path(OUTPUT_ROOT) / "comparison"
    configs: List[ExperimentConfig] = []
    for name in args.algorithms:
        for seed in args.seeds:
            config = replace(base, algorithm=Algorithm(name), seed=seed, output_dir=None)
            configs.append(replace(config, output_dir=str(root / config.run_name)))
    result = compare(configs, workers=base.workers, output_dir=root)
    print(result.table.to_string(index=False))
    if result.acceptance is not None:
        print(json.dumps(result.acceptance.to_dict(), indent=2))
        if not result.acceptance.passed:
            return EXIT_ACCEPTANCE
    return EXIT_OK


def cmd_toy_check(args: argparse.Namespace) -> int:
    failed = 0
    for gamma in args.gamma or TOY_GAMMAS:
        report = toy_mdp_check(gamma=gamma, seed=args.seed)
        status = "ok" if report.passed else "FAIL"
        print(f"gamma={gamma:<5g} Q={report.estimate:.5f} expected={report.expected:.5f} "
              f"error={report.error:.2e} {status}")
        failed += not report.passed
    return EXIT_ACCEPTANCE if failed else EXIT_OK


def cmd_calibrate(args: argparse.Namespace) -> int:
    result = calibrate_from_logs(args.log, return_days=args.return_days)
    fragment = {"sim": result.overrides}
    text = json.dumps(fragment, indent=2)
    if args.output:
        args.output.parent.mkdir(parents=True, exist_ok=True)
        args.output.write_text(text + "\n")
        logger.info("wrote calibrated sim overrides to %s", args.output)
    print(text)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "compare": cmd_compare,
    "toy-check": cmd_toy_check,
    "calibrate": cmd_calibrate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.verb](args)
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        logger.error("numerical abort: %s", exc)
        return EXIT_NUMERICAL
    except LogFormatError as exc:
        logger.error("bad session log: %s", exc)
        return EXIT_ERROR
    except Exception:
        logger.exception("%s failed", args.verb)
        return EXIT_ERROR
