"""Command-line front end.

Subcommands: train | eval | grad-check | align-check | make-data.
Every RunConfig key is exposed as a flag of the same name; a --config file
provides defaults that flags override.  Exit codes: 0 success, 1 usage,
2 data/IO, 3 check failure, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, make_config, parse_config_file
from .data import DataError, load_mnist_dir, make_multi_mnist, save_mm36
from .train import (
    CheckFailure,
    NumericAbort,
    align_check,
    evaluate,
    grad_check,
    resolve_datasets,
    resolve_test_set,
    train_run,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CHECK = 3
EXIT_NUMERIC = 4


class _Parser(argparse.ArgumentParser):
    """argparse, but usage problems exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _add_config_flags(parser: _Parser):
    parser.add_argument("--config", type=str, default=None,
                        help="key = value config file; flags override it")
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        ftype = {"int": int, "float": float, "str": str}[f.type]
        parser.add_argument(flag, type=ftype, default=None, dest=f.name,
                            help=f"default: {f.default}")


def _config_from_args(args) -> RunConfig:
    file_values = parse_config_file(args.config) if args.config else None
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(RunConfig)}
    return make_config(file_values, overrides)


def build_parser() -> _Parser:
    parser = _Parser(prog="butd",
                     description="Tied bottom-up/top-down networks trained with "
                                 "the counter-Hebb rule")
    sub = parser.add_subparsers(dest="command", required=True,
                              parser_class=_Parser)

    p_train = sub.add_parser("train",
                             help="train on the composite-digit benchmark")
    _add_config_flags(p_train)

    p_eval = sub.add_parser("eval",
                            help="score a checkpoint on a dataset")
    p_eval.add_argument("--checkpoint", required=True)
    _add_config_flags(p_eval)

    p_gc = sub.add_parser("grad-check",
                          help="run the update-rule equivalence suites")
    _add_config_flags(p_gc)
    p_gc.add_argument("--trials", type=int, default=100)

    p_ac = sub.add_parser("align-check",
                          help="verify weight-alignment dynamics (untied build)")
    _add_config_flags(p_ac)

    p_md = sub.add_parser("make-data",
                          help="synthesize composite caches from MNIST IDX files")
    _add_config_flags(p_md)
    return parser


def _train_once(cfg: RunConfig, out: Path, train_set, test_set) -> float:
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    with open(metrics_path, "w", encoding="utf-8") as fh:
        def on_record(rec):
            fh.write(json.dumps(rec.to_dict()) + "\n")
            fh.flush()
            line = f"epoch {rec.epoch:4d}  lr {rec.lr:.3e}"
            if rec.avg_train_acc is not None:
                line += f"  train acc {rec.avg_train_acc:.4f}"
            if rec.avg_test_acc is not None:
                line += f"  test acc {rec.avg_test_acc:.4f}"
            print(line)

        net, opt, records = train_run(cfg, train_set, test_set, on_record=on_record)
    save_checkpoint(out / "final.ckpt", net, opt)
    final = records[-1]
    if final.avg_test_acc is not None and final.avg_train_acc is not None:
        gap = abs(final.avg_train_acc - final.avg_test_acc)
        if gap >= 0.02:
            print(f"warning: train/test accuracy gap {gap:.4f} >= 0.02", file=sys.stderr)
    print(f"final avg test accuracy: {final.avg_test_acc:.4f}")
    print(f"wrote {metrics_path} and {out / 'final.ckpt'}")
    return final.avg_test_acc


def cmd_train(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    train_set, test_set = resolve_datasets(cfg)
    if cfg.repetitions <= 1:
        _train_once(cfg, out, train_set, test_set)
        return EXIT_OK
    finals = []
    for rep in range(cfg.repetitions):
        rep_cfg = dataclasses.replace(cfg, seed=cfg.seed + rep)
        print(f"--- repetition {rep} (seed {rep_cfg.seed})")
        finals.append(_train_once(rep_cfg, out / f"rep{rep}", train_set, test_set))
    print(f"mean avg test accuracy over {cfg.repetitions} repetitions: "
          f"{np.mean(finals):.4f} +/- {np.std(finals):.4f}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    net, _ = load_checkpoint(args.checkpoint)
    test_set = resolve_test_set(cfg)
    tasks = None if net.w_task is not None else [cfg.task]
    accs, losses = evaluate(net, test_set, cfg.batch_size, tasks=tasks)
    record = {"test_acc": accs, "test_loss": losses,
              "avg_test_acc": float(np.mean(accs))}
    print(json.dumps(record))
    return EXIT_OK


def cmd_grad_check(cfg: RunConfig, trials: int) -> int:
    results = grad_check(seed=cfg.seed, trials=trials)
    failed = False
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        where = f"  (worst at {r.where})" if r.where and not r.passed else ""
        print(f"{status}  {r.name}: max rel err {r.worst:.3e} <= {r.tol:.0e}{where}")
        failed |= not r.passed
    if failed:
        raise CheckFailure("gradient equivalence suite failed")
    return EXIT_OK


def cmd_align_check(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, checks = align_check(steps=cfg.steps, lr=cfg.lr, lam=cfg.kp_lambda,
                               seed=cfg.seed)
    csv_path = out / "align.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {csv_path}")
    failed = False
    for c in checks:
        status = "PASS" if c.passed else "FAIL"
        print(f"{status}  {c.name}: max rel deviation {c.worst:.3e} <= {c.tol:.0e}")
        failed |= not c.passed
    if failed:
        raise CheckFailure("alignment dynamics check failed")
    return EXIT_OK


def cmd_make_data(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    sources_train = load_mnist_dir(cfg.data, "train")
    sources_test = load_mnist_dir(cfg.data, "test")
    train_set, test_set = make_multi_mnist(sources_train, sources_test,
                                           seed=cfg.seed, n_train=cfg.n_train,
                                           n_test=cfg.n_test)
    save_mm36(out / "train.mm36", train_set)
    save_mm36(out / "test.mm36", test_set)
    print(f"wrote {out / 'train.mm36'} ({len(train_set)} samples) and "
          f"{out / 'test.mm36'} ({len(test_set)} samples)")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # argparse exits for usage errors and --help
            return int(exc.code or 0)
        cfg = _config_from_args(args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(args, cfg)
        if args.command == "grad-check":
            return cmd_grad_check(cfg, args.trials)
        if args.command == "align-check":
            return cmd_align_check(cfg)
        if args.command == "make-data":
            return cmd_make_data(cfg)
        raise AssertionError(args.command)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except NumericAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
