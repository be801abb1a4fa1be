"""``speechengine`` command line.

Each subcommand runs one pipeline stage against an output directory, reading
whatever earlier stages left there; ``run`` does everything in order.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .config import ExperimentConfig, parse_config
from .errors import EngineError


def _load(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, run=replace(cfg.run, seed=args.seed))
    if args.out is not None:
        cfg = replace(cfg, run=replace(cfg.run, out_dir=args.out))
    return cfg


def _units(cfg, out, fn):
    upstream = pipeline.ensure_upstream(cfg, out)
    cache = pipeline.FeatureCache(cfg, pipeline.load_corpus(cfg, out))
    return [fn(cfg, out, upstream, cache, fold, n) for fold, n in pipeline.units(cfg)]


def cmd_synth(cfg, out):
    pipeline.stage_synth(cfg, out)


def cmd_kmeans(cfg, out):
    cb = pipeline.stage_kmeans(cfg, out)
    print(f"codebook: K={cb.K} dim={cb.dim} inertia={cb.inertia_history[-1]:.6g}")


def cmd_pretrain(cfg, out):
    pipeline.stage_pretrain(cfg, out)


def cmd_train(cfg, out):
    for store in _units(cfg, out, pipeline.train_unit):
        print(f"trained {len(store)} checkpoints, last step {store[-1].step}")


def cmd_average(cfg, out):
    for ck in _units(cfg, out, pipeline.average_unit):
        print(f"averaged: step {ck.step} dev {ck.dev_metric:.6g}")


def cmd_eval(cfg, out):
    for report in _units(cfg, out, pipeline.eval_unit):
        print(f"fold {report.fold} n={report.n_per_class or 'full'}: "
              f"accuracy {report.weighted_accuracy:.4f}")


def cmd_sweep(cfg, out):
    pipeline.emit_report(pipeline.sweep(cfg, out), out / "curves.csv")


def cmd_report(cfg, out):
    path = pipeline.emit_report(pipeline.load_reports(out), out / "curves.csv")
    print(path)


def cmd_run(cfg, out):
    pipeline.run_experiment(cfg, out)
    print(out / "curves.csv")


COMMANDS = {
    "synth": (cmd_synth, "write the synthetic task and pretraining corpora"),
    "kmeans": (cmd_kmeans, "fit the cluster codebook on pretraining MFCCs"),
    "pretrain": (cmd_pretrain, "masked-prediction pretraining of the upstream"),
    "train": (cmd_train, "train task heads for every fold and training-set size"),
    "average": (cmd_average, "apply the checkpoint averaging recipe"),
    "eval": (cmd_eval, "duration-sliced evaluation of averaged models"),
    "sweep": (cmd_sweep, "train, average and evaluate every unit, then write curves.csv"),
    "report": (cmd_report, "merge report JSONs into curves.csv"),
    "run": (cmd_run, "the full recipe"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="speechengine", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML experiment config (defaults if omitted)")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--out", help="override run.out_dir")
        p.add_argument("-v", "--verbose", action="count", default=0,
                       help="log progress (-vv for per-step detail)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args)
        out = Path(cfg.run.out_dir)
        COMMANDS[args.command][0](cfg, out)
    except EngineError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
