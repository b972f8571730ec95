"""``efcp`` command line: ``run`` experiments and ``verify`` oracle suites.

Exit codes: 0 success, 1 failed verification, 2 configuration error,
3 diverged run.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import ConfigError, DivergenceError
from .optim import OPTIMIZERS, SCHEDULES, RunConfig, run
from .verify import format_table, run_suites

EXIT_OK, EXIT_VERIFY_FAILED, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

# flag -> RunConfig field
_RUN_FLAGS = {
    "task": "task",
    "opt": "opt",
    "steps": "steps",
    "lr": "lr",
    "schedule": "schedule",
    "wd": "wd",
    "m": "m",
    "density": "density",
    "rank": "rank",
    "block": "block",
    "lambda": "lam",
    "eps": "eps",
    "momentum": "momentum",
    "clip": "clip",
    "d": "d",
    "n": "n",
    "hidden": "hidden",
    "noise_std": "noise_std",
    "batch_size": "batch_size",
    "seed": "seed",
    "precision": "precision",
    "threads": "threads",
    "timing": "timing",
    "error_feedback": "error_feedback",
}


def _task_arg(value):
    if value in ("quadratic", "logistic", "mlp") or (value.startswith("csv:") and len(value) > 4):
        return value
    raise argparse.ArgumentTypeError("expected quadratic, logistic, mlp or csv:<path>")


def build_parser():
    parser = argparse.ArgumentParser(prog="efcp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    d = RunConfig()
    r = sub.add_parser("run", help="train on a task and write metrics", argument_default=argparse.SUPPRESS)
    r.add_argument("--config", help="start from a config.json written by a previous run")
    r.add_argument("--out", help="output directory (default: runs/<opt>-<task>-s<seed>)")
    r.add_argument("--task", type=_task_arg, help=f"quadratic, logistic, mlp or csv:<path> (default {d.task})")
    r.add_argument("--opt", choices=OPTIMIZERS, help=f"optimizer (default {d.opt})")
    r.add_argument("--steps", type=int, help=f"number of steps (default {d.steps})")
    r.add_argument("--lr", type=float, help="learning rate (default depends on --opt)")
    r.add_argument("--schedule", choices=SCHEDULES, help=f"learning-rate schedule (default {d.schedule})")
    r.add_argument("--wd", type=float, help=f"decoupled weight decay (default {d.wd})")
    r.add_argument("--m", type=int, help=f"gradient window size (default {d.m})")
    r.add_argument("--density", type=float, help=f"Top-k density in (0, 1] (default {d.density})")
    r.add_argument("--rank", type=int, help=f"low-rank compression rank (default {d.rank})")
    r.add_argument("--block", type=int, help=f"Top-k block size (default {d.block})")
    r.add_argument("--lambda", dest="lambda", type=float, help=f"M-FAC damping (default {d.lam})")
    r.add_argument("--eps", type=float, help=f"GGT damping (default {d.eps})")
    r.add_argument("--momentum", type=float, help=f"SGD momentum (default {d.momentum})")
    r.add_argument("--clip", type=float, help="clip the update norm to this bound (default off)")
    r.add_argument("--d", type=int, help=f"synthetic task dimension (default {d.d})")
    r.add_argument("--n", type=int, help=f"synthetic sample count (default {d.n})")
    r.add_argument("--hidden", type=int, help=f"MLP hidden width (default {d.hidden})")
    r.add_argument("--noise-std", dest="noise_std", type=float, help="quadratic gradient noise (default 0)")
    r.add_argument("--batch-size", dest="batch_size", type=int, help="mini-batch size (default full batch)")
    r.add_argument("--seed", type=int, help=f"random seed (default {d.seed})")
    r.add_argument("--precision", choices=("f32", "f64"), help=f"window value precision (default {d.precision})")
    r.add_argument("--threads", type=int, help="kernel worker count; never changes results (default 1)")
    r.add_argument("--timing", action="store_true", help="record wall time per step in 'ms' (default 0)")
    r.add_argument(
        "--no-error-feedback",
        dest="error_feedback",
        action="store_false",
        help="disable error feedback for compressed optimizers",
    )

    v = sub.add_parser("verify", help="run the oracle-equivalence suites")
    v.add_argument("--sizes", choices=("default", "large"), default="default")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--threads", type=int, default=1)
    return parser


def _config_from_args(args):
    if "config" in args:
        try:
            with open(args.config) as fh:
                cfg = RunConfig.from_json(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"--config: cannot read {args.config}: {exc}", field="config") from None
        except (TypeError, ConfigError) as exc:
            raise ConfigError(f"--config: {exc}", field="config") from None
    else:
        cfg = RunConfig()
    for flag, attr in _RUN_FLAGS.items():
        if flag in args:
            setattr(cfg, attr, getattr(args, flag))
    return cfg.resolved()


def cmd_run(args):
    try:
        cfg = _config_from_args(args)
    except ConfigError as exc:
        print(f"efcp run: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = getattr(args, "out", None) or os.path.join(
        "runs", f"{cfg.opt}-{cfg.task.replace(':', '_').replace(os.sep, '_')}-s{cfg.seed}"
    )
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as fh:
        json.dump(cfg.to_json(), fh, indent=2)
        fh.write("\n")
    with open(os.path.join(out, "metrics.jsonl"), "w") as metrics:
        try:
            result = run(cfg, on_record=lambda rec: metrics.write(rec.to_json() + "\n"))
        except DivergenceError as exc:
            if exc.record is not None:
                metrics.write(exc.record.to_json() + "\n")
            print(f"efcp run: diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        except ConfigError as exc:
            print(f"efcp run: error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    with open(os.path.join(out, "memory.json"), "w") as fh:
        json.dump(result.memory, fh, indent=2)
        fh.write("\n")
    print(f"{cfg.opt} on {cfg.task}: {cfg.steps} steps, final loss {result.final_loss:.6g} -> {out}")
    return EXIT_OK


def cmd_verify(args):
    if args.threads < 1:
        print("efcp verify: error: --threads: must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    results = run_suites(args.sizes, args.seed, args.threads)
    print(format_table(results))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_VERIFY_FAILED


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    return cmd_verify(args)


if __name__ == "__main__":
    sys.exit(main())
