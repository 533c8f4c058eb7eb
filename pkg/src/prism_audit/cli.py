"""``prism-audit`` command line.

Exit codes: 0 success, 1 usage or config error, 2 data/validation error,
3 statistical degeneracy.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__, pipeline
from .config import SWEEP_AXES, RunConfig, load_config
from .errors import ConfigError, DegenerateVariance, PrismError, ValidationError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DEGENERATE = 0, 1, 2, 3

COMMANDS = ("simulate", "distill", "score", "test", "sweep", "sweep-hparams", "compare-scores", "rank-analysis")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _grid(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must be comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run configuration (YAML); defaults to the run's config.yaml")
    common.add_argument("--run", type=Path, help="run directory (default: runs/<run id>)")
    common.add_argument("--seed", type=int)
    common.add_argument("--k", type=float, help="K percent for Min-K%% scores")
    common.add_argument("--metric", choices=("spearman", "kendall"))
    common.add_argument("--b", type=int, help="bootstrap replicates")
    common.add_argument("--alpha", type=float)
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="prism-audit", description="Rank-correlation non-membership audit on seeded tiny language models.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("simulate", parents=[common], help="generate corpora and train reference and targets")
    s = sub.add_parser("distill", parents=[common], help="distill the reference toward a target")
    s.add_argument("--target", choices=("clean", "member", "both"), default="both")
    s = sub.add_parser("score", parents=[common], help="write .pstats and score files")
    s.add_argument("--dataset", choices=pipeline.DATASETS, default="suspect")
    s = sub.add_parser("test", parents=[common], help="bootstrap non-membership test")
    s.add_argument("--target", choices=("clean", "member", "both"), default="both")
    s = sub.add_parser("sweep", parents=[common], help="ablation sweep along one axis")
    s.add_argument("--axis", choices=SWEEP_AXES, required=True)
    s.add_argument("--grid", type=_grid, help="comma-separated values (default: config sweep grid)")
    s.add_argument("--target", choices=("clean", "member"), default="clean")
    s = sub.add_parser("sweep-hparams", parents=[common], help="temperature grid, then lambda grid, both targets")
    s.add_argument("--tau-grid", type=_grid)
    s.add_argument("--lambda-grid", type=_grid)
    sub.add_parser("compare-scores", parents=[common], help="correlation gap per score kind")
    sub.add_parser("rank-analysis", parents=[common], help="per-document rank change, clean to member target")
    return p


def _resolve(args) -> tuple[RunConfig, Path]:
    if args.config is not None:
        cfg = load_config(args.config)
    elif args.run is not None and (args.run / "config.yaml").exists():
        cfg = load_config(args.run / "config.yaml")
    elif args.command == "simulate":
        raise ConfigError("simulate needs --config")
    else:
        raise ConfigError("need --config or a --run directory containing config.yaml")
    try:
        cfg = cfg.with_overrides(seed=args.seed, k=args.k, metric=args.metric, B=args.b, alpha=args.alpha)
    except ValidationError as exc:
        raise ConfigError(f"invalid command-line override: {exc.message}") from None
    run_dir = args.run if args.run is not None else Path("runs") / cfg.run_id()
    return cfg, run_dir


def _targets(choice: str):
    return pipeline.TARGETS if choice == "both" else (choice,)


def dispatch(args) -> int:
    cfg, run_dir = _resolve(args)
    cmd = args.command
    if cmd == "simulate":
        run = pipeline.Run(run_dir, cfg)
        for p in pipeline.cmd_simulate(run):
            print(p)
        return EXIT_OK
    run = pipeline.Run.open(run_dir, cfg)
    if cmd == "distill":
        for t in _targets(args.target):
            print(pipeline.cmd_distill(run, t))
    elif cmd == "score":
        for p in pipeline.cmd_score(run, args.dataset):
            print(p)
    elif cmd == "test":
        for t in _targets(args.target):
            report = pipeline.cmd_test(run, t)
            print(f"[{t} target]")
            print(report.to_text(), end="")
    elif cmd == "sweep":
        print(pipeline.cmd_sweep(run, args.axis, args.grid, args.target).read_text(encoding="utf-8"), end="")
    elif cmd == "sweep-hparams":
        print(pipeline.cmd_sweep_hparams(run, args.tau_grid, args.lambda_grid).read_text(encoding="utf-8"), end="")
    elif cmd == "compare-scores":
        print(pipeline.cmd_compare_scores(run)[1].read_text(encoding="utf-8"), end="")
    elif cmd == "rank-analysis":
        path = pipeline.cmd_rank_analysis(run)
        rows = pipeline.rank_analysis_rows(run)
        print(path)
        print("mean rank change by decile of clean-target surprisal (low to high):")
        print(" ".join(f"{m:+.1f}" for m in pipeline.decile_means(rows)))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DegenerateVariance as exc:
        print(f"statistical degeneracy: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except ValidationError as exc:
        print(exc.report_line(), file=sys.stderr)
        return EXIT_DATA
    except (PrismError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
