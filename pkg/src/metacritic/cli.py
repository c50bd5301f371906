"""Command-line entry point: ``metacritic <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from .autodiff import ShapeError
from .container import FormatError
from .harness import (ConfigError, emit_report, load_config, load_results,
                      parse_overrides, run_experiment)
from .networks import estimate_critic_memory, format_bytes
from .tasks import make_family, save_corpus

# per-key shorthand flags for `run`; anything else goes through --set
RUN_FLAGS = {
    "name": "experiment.name", "out-dir": "experiment.out_dir",
    "variant": "meta.variant", "inner-steps": "meta.inner_steps", "critic-steps": "meta.critic_steps",
    "meta-batch-size": "meta.meta_batch_size", "outer-lr": "meta.outer_lr",
    "arch": "model.arch", "task": "task.kind", "task-seed": "task.seed",
    "way": "task.way", "shot": "task.shot", "query": "task.query",
    "epochs": "train.epochs", "train-episodes": "train.train_episodes",
    "val-episodes": "train.val_episodes", "test-episodes": "train.test_episodes",
    "patience": "train.patience",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metacritic", description="Meta-learning with a learned label-free critic.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train and evaluate an experiment")
    run.add_argument("--config", type=Path, help="flat 'section.key = value' config file")
    run.add_argument("--seed", type=int, action="append", dest="seeds",
                     help="run this seed (repeatable); replaces experiment.seeds")
    run.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                     help="override any config key (repeatable)")
    run.add_argument("--parallel", action="store_true", help="run seeds in parallel processes")
    run.add_argument("--format", choices=("table", "csv", "json"), default="table")
    run.add_argument("--quiet", action="store_true", help="suppress per-epoch progress")
    for flag, key in RUN_FLAGS.items():
        run.add_argument(f"--{flag}", dest=f"flag_{key}", metavar="VALUE", help=f"same as --set {key}=VALUE")

    gc = sub.add_parser("gradcheck", help="finite-difference verification of the autodiff engine")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--skip-params-variant", action="store_true")

    mem = sub.add_parser("estimate-memory", help="critic memory for a base model of P parameters")
    mem.add_argument("--params", type=int, required=True)
    mem.add_argument("--bytes", type=int, default=4, help="bytes per value (default 4)")

    gen = sub.add_parser("gen-corpus", help="write a synthetic episode corpus")
    gen.add_argument("--kind", choices=("gaussian_blobs", "pattern_glyphs"), default="gaussian_blobs")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--samples-per-class", type=int, default=20)
    gen.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="family parameter, e.g. noise=0.5")
    gen.add_argument("--out", type=Path, required=True)

    rep = sub.add_parser("report", help="re-render stored result records")
    rep.add_argument("results", nargs="+", type=Path)
    rep.add_argument("--format", choices=("table", "csv", "json"), default="table")
    return parser


def _run(args) -> int:
    overrides = parse_overrides(args.set)
    for key in RUN_FLAGS.values():
        value = getattr(args, f"flag_{key}")
        if value is not None:
            overrides.update(parse_overrides([f"{key}={value}"]))
    if args.seeds:
        overrides["experiment.seeds"] = tuple(args.seeds)
    cfg = load_config(args.config, overrides)
    log = None if args.quiet else (lambda msg: print(msg, file=sys.stderr, flush=True))
    result = run_experiment(cfg, log=log, parallel=args.parallel or None)
    print(emit_report([result], args.format), end="")
    print(f"result written to {Path(cfg.out_dir) / cfg.name / 'result.json'}", file=sys.stderr)
    return 0


def _gradcheck(args) -> int:
    from .gradcheck import run_suite
    results = run_suite(args.seed, include_params_variant=not args.skip_params_variant)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name.ljust(width)}  max rel err {r.max_rel_error:.3e}  (tol {r.tolerance:.0e}, "
              f"{r.coordinates} coords)  {status}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def _estimate_memory(args) -> int:
    n = estimate_critic_memory(args.params, args.bytes)
    print(f"{format_bytes(n)} ({n} bytes) for the critic's first fully connected layer")
    return 0


def _gen_corpus(args) -> int:
    params = {}
    for item in args.set:
        params.update({k.split(".", 1)[-1]: v for k, v in parse_overrides([f"task.{item}"]).items()})
    family = make_family(args.kind, args.seed, **params)
    corpus = family.materialize(args.samples_per_class)
    save_corpus(args.out, corpus)
    print(f"wrote {sum(len(v) for v in corpus.splits.values())} classes to {args.out}")
    return 0


def _report(args) -> int:
    print(emit_report(load_results(args.results), args.format), end="")
    return 0


COMMANDS = {"run": _run, "gradcheck": _gradcheck, "estimate-memory": _estimate_memory,
            "gen-corpus": _gen_corpus, "report": _report}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FormatError, ShapeError, ValueError, FileNotFoundError,
            json.JSONDecodeError, FloatingPointError) as exc:
        print(f"metacritic {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
