"""Command line entry point: ``consortium-rl <command> [options]``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import harness
from .dynamics import (INITIAL_CONDITIONS, NOMINAL_OPERATING, NOMINAL_PARAMETERS, IntegrationStats,
                       load_parameters, read_actions_csv, simulate_episode, write_trajectory_csv)
from .errors import ConsortiumError, InvalidInputError
from .metrics import write_rank_table

log = logging.getLogger("consortium_rl")


def _resolve_config(args) -> harness.ExperimentConfig:
    if args.config:
        cfg = harness.load_config(args.config)
        if args.paper_scale and cfg.scale != "paper":
            n_mc, epochs = harness.PAPER_BUDGET[cfg.case]
            cfg = dataclasses.replace(cfg, scale="paper", training=dataclasses.replace(
                cfg.training, n_mc=n_mc, max_epochs=epochs, patience=epochs))
    else:
        cfg = harness.ExperimentConfig.for_case(args.case, paper_scale=args.paper_scale)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, training=dataclasses.replace(cfg.training, seed=args.seed))
    if args.out:
        cfg = dataclasses.replace(cfg, out=args.out)
    return cfg


def cmd_config(args) -> int:
    cfg = harness.ExperimentConfig.for_case(args.case, paper_scale=args.paper_scale)
    text = json.dumps(cfg.to_dict(), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_experiment(args) -> int:
    cfg = _resolve_config(args)
    manifest = harness.run_experiment(cfg, workers=args.workers, dry_run=args.dry_run)
    n_ok = sum(s["status"] == "ok" for s in manifest["scenarios"])
    print(f"{len(manifest['scenarios'])} scenarios, {n_ok} trained, "
          f"{len(manifest['failures'])} failed; results in {cfg.out}")
    if not args.dry_run:
        print((Path(cfg.out) / "rank_table.csv").read_text(), end="")
    return 1 if manifest["failures"] else 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    training = cfg.training
    if args.epochs is not None:
        training = dataclasses.replace(training, max_epochs=args.epochs,
                                       patience=min(training.patience, args.epochs))
    if args.n_mc is not None:
        training = dataclasses.replace(training, n_mc=args.n_mc)
    if args.alpha is not None:
        training = dataclasses.replace(training, alpha=args.alpha)
    cfg = dataclasses.replace(cfg, training=training)
    scenarios = {s.scenario_id: s for s in harness.expand_scenarios(cfg)}
    wanted = args.scenario or next(iter(scenarios))
    if wanted not in scenarios:
        raise InvalidInputError(f"unknown scenario {wanted!r}; choose from: {', '.join(scenarios)}")
    scn = scenarios[wanted]
    directory = Path(cfg.out) / scn.reference.label / scn.name
    metrics = harness.run_scenario(scn, directory)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    print(json.dumps(harness.evaluate_run(args.run_dir), indent=2, sort_keys=True))
    return 0


def cmd_rank(args) -> int:
    results = harness.collect_metrics(args.experiment_dir)
    if not results:
        raise InvalidInputError(f"no scenario metrics found below {args.experiment_dir}")
    rows = harness.rank_results(results)
    out = Path(args.out) if args.out else Path(args.experiment_dir) / "rank_table.csv"
    write_rank_table(out, rows)
    print(out.read_text(), end="")
    return 0


def cmd_simulate(args) -> int:
    if args.params:
        params, op = load_parameters(args.params)
    else:
        params, op = NOMINAL_PARAMETERS, NOMINAL_OPERATING
    actions = read_actions_csv(args.actions)
    if actions.shape[0] == 0:
        raise InvalidInputError("the action file has no rows")
    stats = IntegrationStats()
    states = simulate_episode(INITIAL_CONDITIONS[args.initial], actions, params, op,
                              dt_control=args.dt, n_substeps=args.substeps, stats=stats)
    write_trajectory_csv(args.out, states, actions, args.dt)
    print(f"wrote {len(states)} rows to {args.out} "
          f"({stats.implicit} implicit substeps, {stats.clamped} clamps)")
    return 0


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config (JSON); defaults to the built-in case")
    p.add_argument("--case", type=int, default=1, choices=(1, 2, 3, 4),
                   help="control case used when no --config is given")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--paper-scale", action="store_true",
                   help="use the full episode and epoch budget instead of the desk-scale one")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="consortium-rl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("config", help="print a default experiment config")
    p.add_argument("--case", type=int, default=1, choices=(1, 2, 3, 4))
    p.add_argument("--paper-scale", action="store_true")
    p.add_argument("--out", help="write to this file instead of stdout")
    p.set_defaults(func=cmd_config)

    p = sub.add_parser("experiment", help="train every scenario of a case and rank them")
    _add_run_options(p)
    p.add_argument("--workers", type=int, default=1, help="scenarios trained in parallel")
    p.add_argument("--dry-run", action="store_true", help="expand and validate scenarios only")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("train", help="train a single scenario")
    _add_run_options(p)
    p.add_argument("--scenario", help="scenario id such as sp_3_4/1_sr_1_tr_beta_27")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--n-mc", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="recompute metrics of a trained scenario directory")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("rank", help="rebuild the rank table of an experiment directory")
    p.add_argument("experiment_dir")
    p.add_argument("--out", help="rank table path (default: <experiment_dir>/rank_table.csv)")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("simulate", help="open-loop rollout of an I1,I2 action file")
    p.add_argument("--actions", required=True)
    p.add_argument("--initial", choices=sorted(INITIAL_CONDITIONS), default="setpoint")
    p.add_argument("--params", help="JSON file overriding model/operating parameters")
    p.add_argument("--dt", type=float, default=1.0)
    p.add_argument("--substeps", type=int, default=20)
    p.add_argument("--out", default="trajectory.csv")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConsortiumError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
