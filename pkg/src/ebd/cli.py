"""Command-line entry points.

Verbs: train, eval, probe-correlation, probe-alignment, fdcheck.
Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:                       # 3.10
    import tomli as tomllib

from .core import ConfigError, NumericError
from .data import FormatError, load_checkpoint
from .trainer import evaluate, load_dataset, train, validate_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def load_config(path: str) -> dict:
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"bad TOML in {path}: {e}") from e


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="TOML run configuration")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out-dir", default="runs/out", help="metrics/checkpoint directory")
    p.add_argument("--data-dir", default=os.environ.get("EBD_DATA_DIR"),
                   help="dataset root (defaults to $EBD_DATA_DIR)")
    p.add_argument("--precision", choices=("f32", "f64"), default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")


def _apply_overrides(cfg: dict, args) -> dict:
    if args.precision:
        cfg["precision"] = args.precision
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    res = train(cfg, args.out_dir, data_dir=args.data_dir, seed=cfg.get("seed"),
                resume=args.resume)
    print(res.metrics_path)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    validate_config(cfg)
    if cfg["rule"] == "corinfomax_ebd":
        raise ConfigError("eval verb supports feedforward checkpoints; "
                          "corinfomax runs evaluate during training")
    dtype = np.float64 if cfg.get("precision", "f32") == "f64" else np.float32
    from .forward import build_network
    from .trainer import _layer_specs

    train_ds, test_ds = load_dataset(cfg, args.data_dir, dtype)
    ds = test_ds if args.split == "test" else train_ds
    shape = train_ds.X.shape[1:] if train_ds.X.ndim > 2 else (train_ds.X.shape[1],)
    ini = cfg.get("init", {})
    net = build_network(_layer_specs(cfg), shape, cfg.get("seed", 0),
                        scheme=ini.get("scheme", "kaiming_uniform"),
                        gain=ini.get("gain", 0.75),
                        weight_sparsity=ini.get("weight_sparsity", 0.0), dtype=dtype)
    blob = load_checkpoint(args.checkpoint)
    for k in net.trainable_indices():
        net.layers[k].params.W[...] = blob[f"l{k}.W"]
        net.layers[k].params.b[...] = blob[f"l{k}.b"]
    acc, mse = evaluate(net, ds)
    print(f"split={args.split} accuracy={acc:.6g} mse={mse:.6g}")
    return EXIT_OK


def cmd_probe_correlation(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    cfg.setdefault("metrics", {})["correlation_probe"] = True
    res = train(cfg, args.out_dir, data_dir=args.data_dir, seed=cfg.get("seed"),
                resume=args.resume)
    print(res.metrics_path)
    return EXIT_OK


def cmd_probe_alignment(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    if cfg.get("rule") != "ebd":
        raise ConfigError("alignment probe requires rule = 'ebd'")
    cfg.setdefault("metrics", {})["alignment_probe"] = True
    res = train(cfg, args.out_dir, data_dir=args.data_dir, seed=cfg.get("seed"),
                resume=args.resume)
    print(res.metrics_path)
    return EXIT_OK


def cmd_fdcheck(args) -> int:
    from .fdsuite import run_suite

    worst = run_suite(seed=args.seed or 0, n_nets=args.nets)
    bad = False
    for name, err in worst.items():
        ok = err <= args.tol
        bad |= not ok
        print(f"{name:18s} max_rel_err={err:.3e} {'ok' if ok else 'FAIL'}")
    return EXIT_OK if not bad else EXIT_NUMERIC


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ebd", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="run one training experiment")
    _common_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("probe-correlation", help="train while streaming error-activation correlations")
    _common_flags(p)
    p.set_defaults(fn=cmd_probe_correlation)

    p = sub.add_parser("probe-alignment", help="train EBD while logging alignment cosines")
    _common_flags(p)
    p.set_defaults(fn=cmd_probe_alignment)

    p = sub.add_parser("fdcheck", help="finite-difference gradient oracle")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--nets", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(fn=cmd_fdcheck)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
