"""Command line: ``unreal run|sweep|plot|eval``.

Exit codes: 0 ok, 1 config error, 2 runtime failure.
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import ConfigError, dump_config, load_config, parse_config, to_dict
from .plotting import EmptyMetrics, plot
from .sweep import load_sweep, run_sweep
from .trainer import ResumeMismatch, Trainer

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("unreal")


def _load(args):
    config = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        raw = to_dict(config)
        raw["seed"] = args.seed
        raw["run_id"] = None
        config = parse_config(raw)
    return config


def cmd_run(args):
    config = _load(args)
    out = Path(args.out or Path("runs") / config.run_id)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(config, out / "config.yaml")
    try:
        trainer = Trainer(config, out_dir=out, resume=args.resume)
    except ResumeMismatch as exc:
        print(f"resume mismatch: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    result = trainer.train()
    if args.frames_dump:
        trainer.evaluate(episodes=1, frames_dump=args.frames_dump)
    last = result.rows[-1] if result.rows else {}
    print(f"{config.run_id}: {result.global_step} steps, final train return {last.get('train_return')}, "
          f"eval return {last.get('eval_return')}; metrics in {result.metrics_path}")
    return EXIT_OK


def cmd_sweep(args):
    spec = load_sweep(args.config)
    if args.jobs:
        spec.parallel_jobs = args.jobs
    summary = run_sweep(spec, args.out or Path("sweeps") / spec.base.label)
    for entry in sorted(summary, key=lambda e: -(e["final_score"] if e["final_score"] is not None else -np.inf)):
        print(f"{entry['run_id']:>28}  lr={entry['lr']:.2e}  ent={entry['entropy_cost']:.2e}  "
              f"pc={entry['lambda_pc']:.3f}  {entry['status']:>6}  score={entry['final_score']}")
    return EXIT_OK


def cmd_plot(args):
    info = plot(args.metrics, args.out or "plots")
    for label in info["labels"]:
        print(f"{label}: ratio vs {info['baseline']} = {info['ratios'][label]}")
    return EXIT_OK


def cmd_eval(args):
    config = _load(args)
    trainer = Trainer(config)
    tensors, meta = checkpoint.load(args.checkpoint)
    params, _ = checkpoint.split_store(tensors)
    if meta.get("preset") != trainer.preset.name or set(params) != set(trainer.store.params):
        print("checkpoint does not match the configured architecture", file=sys.stderr)
        return EXIT_CONFIG
    for k, v in params.items():
        trainer.store.params[k][...] = v
    mean, optimal, returns = trainer.evaluate(episodes=args.episodes, frames_dump=args.frames_dump)
    for i, r in enumerate(returns):
        print(f"episode {i}: return {r}")
    print(f"mean return {mean}" + (f" (scripted optimal {optimal})" if optimal is not None else ""))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="unreal", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--seed", type=int)
    p.add_argument("--frames-dump", help="write PPM frames of one greedy episode after training")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="log-uniform hyperparameter sweep")
    p.add_argument("--config", required=True, help="sweep file")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, help="runs executed in parallel")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", help="learning, robustness and ablation plots")
    p.add_argument("metrics", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("eval", help="greedy rollouts of a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", "--resume", dest="checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=5)
    p.add_argument("--seed", type=int)
    p.add_argument("--frames-dump")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except EmptyMetrics as exc:
        print(f"plot: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
