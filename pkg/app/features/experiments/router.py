import argparse
import asyncio
import json
import logging

import pandas as pd

from app.features.diagnostics.service import fit_loglog_slope
from app.features.experiments.service import check_stepsize_guards, load_suite, run_all
from app.features.potentials.service import (
    BUILTIN_KINDS,
    check_growth,
    check_strong_monotonicity,
    sampling_radius,
    summarize,
)
from app.infrastructure.config import settings
from app.infrastructure.database import engine

logger = logging.getLogger(__name__)

VALIDATION_PAIRS = 2000


def _print_table(records) -> None:
    frame = pd.DataFrame([r.model_dump() for r in records])
    if frame.empty:
        print("(no experiments)")
        return
    print(frame.to_string(index=False))


async def _run_suite(args: argparse.Namespace):
    try:
        return await run_all(
            args.config,
            out_dir=args.out_dir,
            seed=args.seed,
            threads=args.threads,
            override_stepsize_guard=args.override_stepsize_guard,
            use_cache=not args.no_cache,
        )
    finally:
        # pooled connections belong to this event loop
        await engine.dispose()


def handle_run(args: argparse.Namespace) -> int:
    outcome = asyncio.run(_run_suite(args))
    _print_table(outcome.summary)
    print(f"\nOutputs written to {outcome.out_dir}")
    return outcome.exit_code


def handle_validate(args: argparse.Namespace) -> int:
    """Parse the suite, check every potential's constants, and apply the stepsize guard."""
    loaded = load_suite(args.config, seed=args.seed)
    failed = False
    checked = set()
    for item in loaded.experiments:
        spec = item.spec
        if spec.name in checked:
            continue
        checked.add(spec.name)
        summary = summarize(spec)
        mono = check_strong_monotonicity(spec, VALIDATION_PAIRS, item.seed)
        growth = check_growth(spec, VALIDATION_PAIRS, sampling_radius(spec), item.seed)
        failed = failed or not (mono.passed and growth.passed)
        print(
            f"{spec.name} ({spec.kind}, d={spec.dimension}, {summary.regularity_class}): "
            f"mu={spec.mu:g} L={summary.guard.constant_L:g} "
            f"gamma < {summary.guard.convergence_bound:.6g} "
            f"(Lipschitz bound {summary.guard.lipschitz_bound:.6g}); "
            f"monotonicity {'ok' if mono.passed else 'FAILED'} ({mono.min_ratio:.4g}), "
            f"growth {'ok' if growth.passed else 'FAILED'} ({growth.max_ratio:.4g})"
        )
    for message in check_stepsize_guards(loaded, override=args.override_stepsize_guard):
        print(f"warning: {message}")
    print(f"{len(loaded.experiments)} experiment(s) in {loaded.path} are valid")
    return 1 if failed else 0


def handle_list_potentials(args: argparse.Namespace) -> int:
    if args.config is None:
        for kind, description in BUILTIN_KINDS.items():
            print(f"{kind:22s} {description}")
        return 0
    loaded = load_suite(args.config)
    seen = {}
    for item in loaded.experiments:
        seen.setdefault(item.spec.name, item.spec)
    for name in loaded.suite.potentials:
        seen.setdefault(name, None)
    for name, spec in seen.items():
        if spec is None:
            print(f"{name:22s} (defined, unused)")
            continue
        print(json.dumps(summarize(spec).model_dump(), sort_keys=True))
    return 0


def handle_slope(args: argparse.Namespace) -> int:
    """Fit a log-log slope to two columns of a results CSV."""
    frame = pd.read_csv(args.csv)
    if args.metric is not None:
        frame = frame[frame["metric_name"] == args.metric]
    missing = [c for c in (args.x, args.y) if c not in frame.columns]
    if missing:
        # long-format results: pick the y column out of metric_name
        if "metric_name" in frame.columns and args.y in set(frame["metric_name"]):
            frame = frame[frame["metric_name"] == args.y].rename(columns={"value": args.y})
        else:
            raise ValueError(f"{args.csv}: no column(s) {missing}")
    frame = frame.sort_values(args.x)
    fit = fit_loglog_slope(
        frame[args.x].to_numpy(),
        frame[args.y].to_numpy(),
        bootstrap_n=settings.BOOTSTRAP_SAMPLES,
        seed=args.seed or 0,
    )
    print(
        f"slope {fit.slope:.4f}  intercept {fit.intercept:.4f}  "
        f"{fit.level:.0%} CI [{fit.ci_low:.4f}, {fit.ci_high:.4f}]  n={len(fit.grid)}"
    )
    return 0


def add_subcommands(parser: argparse.ArgumentParser, parents=()) -> None:
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=parents, help="run every experiment of a suite config")
    run.add_argument("config")
    run.set_defaults(handler=handle_run)

    validate = sub.add_parser(
        "validate", parents=parents, help="check a suite config without running it"
    )
    validate.add_argument("config")
    validate.set_defaults(handler=handle_validate)

    listing = sub.add_parser(
        "list-potentials", parents=parents, help="list potential kinds or a suite's potentials"
    )
    listing.add_argument("--config", default=None)
    listing.set_defaults(handler=handle_list_potentials)

    slope = sub.add_parser("slope", parents=parents, help="fit a log-log slope to a results CSV")
    slope.add_argument("csv")
    slope.add_argument("--x", default="gamma")
    slope.add_argument("--y", default="value")
    slope.add_argument("--metric", default=None, help="keep only rows with this metric_name")
    slope.set_defaults(handler=handle_slope)
