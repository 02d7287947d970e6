"""``attr-eval`` command line.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .config import ConfigError, parse_config
from .container import ContainerError, load_model

log = logging.getLogger("attr_eval")


def _jobs(value) -> int:
    if value is None:
        value = os.environ.get("ATTR_EVAL_JOBS", "1")
    try:
        jobs = int(value)
    except ValueError:
        raise ConfigError("--jobs", f"expected an integer, got {value!r}") from None
    if jobs < 1:
        raise ConfigError("--jobs", "must be >= 1")
    return jobs


def _shape(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(p) for p in text.lower().replace(",", "x").split("x") if p)
    except ValueError:
        raise ConfigError("--input-shape", f"expected e.g. 3x8x8, got {text!r}") from None
    if not dims or min(dims) < 1:
        raise ConfigError("--input-shape", f"expected positive extents, got {text!r}")
    return dims


def cmd_run(args) -> int:
    from .runner import run_experiment

    cfg = parse_config(args.config)
    jobs = _jobs(args.jobs)
    result = run_experiment(cfg, out_dir=args.out, seed=args.seed, jobs=jobs)
    out = args.out or cfg.output_dir
    for name, acc in result.train_accuracy.items():
        print(f"model {name}: train accuracy {acc:.4f}")
    for a in result.aucs:
        print(f"{a.model:>12} {a.metric:>10} {a.method:>22}  auc={a.auc:.4f} [{a.ci_low:.4f}, {a.ci_high:.4f}]")
    print(f"wrote {len(result.files)} files to {out}")
    return 0


def cmd_train(args) -> int:
    from .runner import train_only

    cfg = parse_config(args.config)
    for name, (path, acc) in train_only(cfg, args.out, _jobs(args.jobs)).items():
        print(f"model {name}: train accuracy {acc:.4f} -> {path}")
    return 0


def cmd_gradcheck(args) -> int:
    from .tensor_core import grad_check

    shape = _shape(args.input_shape) if args.input_shape else None
    try:
        model = load_model(args.model, input_shape=shape)
    except ContainerError as exc:
        raise ConfigError("--model", str(exc)) from None
    if shape is None:
        if model.layers and model.layers[0].kind == "dense":
            shape = (model.layers[0].in_features,)
            model.input_shape = shape
        else:
            raise ConfigError("--input-shape", "required for models that do not start with a dense layer")
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for trial in range(args.trials):
        x = rng.uniform(0.0, 1.0, size=shape)
        err = grad_check(model, x, int(rng.integers(model.num_classes)), args.h)
        worst = max(worst, err)
        log.info("trial %d: max relative error %.3e", trial, err)
    ok = worst <= args.tol
    print(f"max relative error {worst:.3e} over {args.trials} inputs: {'PASS' if ok else 'FAIL'} (tol {args.tol:g})")
    return 0 if ok else 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attr-eval", description="Attribution-map faithfulness evaluation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the full experiment grid")
    run.add_argument("--config", required=True)
    run.add_argument("--out")
    run.add_argument("--seed", type=int)
    run.add_argument("--jobs")
    run.set_defaults(func=cmd_run)

    tr = sub.add_parser("train", help="train and save the configured models")
    tr.add_argument("--config", required=True)
    tr.add_argument("--out")
    tr.add_argument("--jobs")
    tr.set_defaults(func=cmd_train)

    gc = sub.add_parser("gradcheck", help="compare backprop with finite differences")
    gc.add_argument("--model", required=True)
    gc.add_argument("--input-shape")
    gc.add_argument("--trials", type=int, default=10)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--h", type=float, default=1e-5)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
