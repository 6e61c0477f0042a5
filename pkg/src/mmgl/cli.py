"""Command-line entry point: pretrain, finetune, eval, gradcheck.

Exit codes: 0 ok, 2 config/usage error, 3 numerical failure. The
MMGL_THREADS environment variable bounds worker count (default 1, which
keeps every run bit-deterministic).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint
from .config import Config, ConfigError, default_config, load_config_file, serialize_config
from .data import make_splits
from .encoder import init_params
from .evaluation import evaluate_retrieval
from .gradcheck import run_full_suite
from .train import ArchitectureMismatchError, DivergenceError, _restore_params, encoder_config
from .train import finetune as run_finetune
from .train import pretrain as run_pretrain

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _defaults_epilog() -> str:
    return "config defaults:\n  " + serialize_config(default_config()).rstrip().replace(
        "\n", "\n  "
    )


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmgl",
        description=__doc__,
        epilog=_defaults_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "pretrain",
        help="self-supervised pre-training on the synthetic two-modality pool",
        epilog=_defaults_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--out", required=True, help="output directory (metrics + checkpoints)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")

    f = sub.add_parser(
        "finetune",
        help="supervised fine-tuning from a checkpoint or from random init",
        epilog=_defaults_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    f.add_argument("--config", required=True)
    f.add_argument("--init", required=True, help="checkpoint path or 'random'")
    f.add_argument("--out", required=True)
    f.add_argument("--seed", type=int, default=None)

    e = sub.add_parser("eval", help="retrieval evaluation of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--seed", type=int, default=None)

    g = sub.add_parser("gradcheck", help="finite-difference validation of every gradient path")
    g.add_argument("--tolerance", type=float, default=1e-3)
    g.add_argument("--seeds", type=int, default=20)
    return parser


def _load_config(path: str, seed: int | None) -> Config:
    cfg = load_config_file(path)
    threads = int(os.environ.get("MMGL_THREADS", "1"))
    train = dataclasses.replace(cfg.train, threads=max(1, threads))
    if seed is not None:
        train = dataclasses.replace(train, seed=seed)
    return Config(train=train, data=cfg.data)


def _cmd_pretrain(args) -> int:
    cfg = _load_config(args.config, args.seed)
    splits = make_splits(cfg.data, seed=cfg.data.seed)
    result = run_pretrain(cfg, splits.pretrain_pool, out_dir=args.out)
    last = result.metrics[-1] if result.metrics else {}
    print(
        json.dumps(
            {
                "steps": result.steps_run,
                "final": last,
                "checkpoint": str(result.checkpoint_path),
            }
        )
    )
    return EXIT_OK


def _cmd_finetune(args) -> int:
    cfg = _load_config(args.config, args.seed)
    splits = make_splits(cfg.data, seed=cfg.data.seed)
    init = None if args.init == "random" else load_checkpoint(args.init)
    result = run_finetune(cfg, splits.finetune_train, init=init, out_dir=args.out)
    res = evaluate_retrieval(
        result.params,
        splits.query,
        splits.gallery,
        num_splits=10,
        seed=cfg.train.seed,
        threads=cfg.train.threads,
    )
    print(json.dumps(res.to_json()))
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = _load_config(args.config, args.seed)
    ckpt = load_checkpoint(args.checkpoint)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.train.seed, 0]))
    params = init_params(encoder_config(cfg), rng)
    _restore_params(params, ckpt.params, subset=lambda n: n.startswith("stem."))
    splits = make_splits(cfg.data, seed=cfg.data.seed)
    res = evaluate_retrieval(
        params,
        splits.query,
        splits.gallery,
        num_splits=10,
        seed=cfg.train.seed,
        threads=cfg.train.threads,
    )
    print(json.dumps(res.to_json()))
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    corrupt = os.environ.get("MMGL_CORRUPT_PRIMITIVE")
    if corrupt:
        T.set_gradient_corruption(corrupt)
    try:
        failures = run_full_suite(rel_tol=args.tolerance, seeds=args.seeds, echo=print)
    finally:
        T.set_gradient_corruption(None)
    if failures:
        for f in failures:
            print(f"FAIL {f}", file=sys.stderr)
        return EXIT_NUMERICAL
    print("gradcheck: all clear")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "pretrain": _cmd_pretrain,
        "finetune": _cmd_finetune,
        "eval": _cmd_eval,
        "gradcheck": _cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, ArchitectureMismatchError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, T.NonFiniteError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
