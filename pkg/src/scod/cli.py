"""Command-line driver.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .errors import ConfigError, DataError, NumericError
from .experiments import (
    METHODS,
    POST_HOC_METHODS,
    SCENARIOS,
    load_experiment,
    method_scores,
    prepare_from_logits,
    resolve_output_dir,
    run_budget,
    run_experiment,
    scenario_config,
)
from .logits_io import read_logits
from .metrics import to_json

log = logging.getLogger("scod")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _apply_overrides(cfg, args):
    changes = {}
    if getattr(args, "seeds", None) is not None:
        if not args.seeds:
            raise ConfigError("--seeds: at least one seed is required")
        changes["seeds"] = tuple(args.seeds)
    if getattr(args, "c_fn", None) is not None:
        if not 0.0 <= args.c_fn <= 1.0:
            raise ConfigError("--c-fn must lie in [0, 1]")
        changes["c_fn"] = args.c_fn
    if getattr(args, "methods", None):
        bad = [m for m in args.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"--methods: unknown method(s) {bad}")
        changes["methods"] = tuple(args.methods)
    return replace(cfg, **changes) if changes else cfg


def cmd_run(args) -> int:
    cfg = _apply_overrides(load_experiment(args.config), args)
    out = resolve_output_dir(cfg, args.output_dir)
    summary = run_experiment(cfg, out)
    _print_summary(summary, out)
    return 0


def cmd_demo(args) -> int:
    cfg = _apply_overrides(scenario_config(args.scenario), args)
    out = resolve_output_dir(cfg, args.output_dir)
    summary = run_experiment(cfg, out)
    _print_summary(summary, out)
    return 0


def cmd_budget(args) -> int:
    cfg = _apply_overrides(load_experiment(args.config), args)
    out = resolve_output_dir(cfg, args.output_dir)
    report = run_budget(cfg, out)
    for r in report["results"]:
        flag = "" if r["feasible"] else "  (infeasible: minimal violation)"
        print(
            f"{r['method']:>14} seed={r['seed']} b_rej={r['b_rej']:.3f} lambda={r['lambda']:.4g} "
            f"abstention={r['abstention']:.4f} objective={r['objective']:.4f}{flag}"
        )
    print(f"wrote {out / 'budget.csv'}")
    return 0


def cmd_ingest_check(args) -> int:
    data = read_logits(args.logits)
    counts = {o: int((data.origin == o).sum()) for o in ("in", "out", "wild", "strict_in")}
    print(f"L={data.num_classes} E={data.embed_dim} records={len(data)} has_ood={data.has_ood}")
    for o, n in counts.items():
        print(f"  {o:>9}: {n}")
    return 0


def cmd_curve(args) -> int:
    if args.method not in POST_HOC_METHODS:
        raise ConfigError(f"--method must be one of {list(POST_HOC_METHODS)} for a logits file")
    from .experiments import ExperimentConfig, evaluate_method

    cfg = ExperimentConfig(
        name="curve", methods=(args.method,), seeds=(0,), output_dir=Path("."), c_fn=args.c_fn,
        grid_size=args.grid_size,
    )
    art = prepare_from_logits(read_logits(args.logits))
    ms = method_scores(args.method, art, cfg)
    curve, summary = evaluate_method(ms, art, cfg)
    if args.out:
        Path(args.out).write_text(curve.to_csv())
        Path(args.out).with_suffix(".json").write_text(to_json(summary))
    else:
        sys.stdout.write(curve.to_csv())
    print(f"AUC-RC={curve.auc_rc:.6f}", file=sys.stderr)
    return 0


def _print_summary(summary: dict, out: Path) -> None:
    print(f"{summary['name']}: c_fn={summary['c_fn']} seeds={summary['seeds']}")
    for method, s in summary["methods"].items():
        print(f"  {method:>14}  AUC-RC {s['auc_rc_mean']:.4f} +/- {s['auc_rc_std']:.4f}")
    print(f"artifacts in {out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scod", description="Selective classification with OOD detection.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--output-dir", help="override the config's output directory (and $SCOD_OUTPUT_DIR)")
        sp.add_argument("--seeds", type=int, nargs="*", help="override the seed list")
        sp.add_argument("--c-fn", type=float, help="override the outlier-miss cost")
        sp.add_argument("--methods", nargs="+", help="override the method list")

    r = sub.add_parser("run", help="run the methods of a config over its seeds")
    r.add_argument("config")
    common(r)
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("budget", help="abstention-budget Lagrangian search")
    b.add_argument("config")
    common(b)
    b.set_defaults(func=cmd_budget)

    d = sub.add_parser("demo", help="run a bundled synthetic scenario")
    d.add_argument("scenario", choices=SCENARIOS)
    common(d)
    d.set_defaults(func=cmd_demo)

    i = sub.add_parser("ingest-check", help="validate a logits file")
    i.add_argument("logits")
    i.set_defaults(func=cmd_ingest_check)

    c = sub.add_parser("curve", help="risk-coverage curve of a post-hoc method on a logits file")
    c.add_argument("logits")
    c.add_argument("--method", required=True)
    c.add_argument("--c-fn", type=float, default=0.75)
    c.add_argument("--grid-size", type=int, default=101)
    c.add_argument("--out", help="write the CSV here (plus a .json summary) instead of stdout")
    c.set_defaults(func=cmd_curve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
