"""kron-fc command line: compress, train, finetune, eval, report and selftest.

Exit codes: 0 success, 1 selftest failure, 2 runtime or data error, 64 usage or
config error. Every flag is validated before any file is read or written.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import os
import sys
from typing import Any, Sequence

import numpy as np

from kron_fc import __version__, kfc
from kron_fc.accounting import (
    chinese_table,
    mnist_table,
    model_params,
    replaced_layer_params,
    svhn_table,
)
from kron_fc.formats import (
    ReportRow,
    emit_report,
    load_checkpoint,
    load_mnist,
    parse_config,
    save_checkpoint,
)
from kron_fc.linalg import Rng
from kron_fc.nkp import compress_fc
from kron_fc.presets import PRESET_VERSION, build_model
from kron_fc.selftest import run_selftest
from kron_fc.train import Dense, KfcLayer, Model, TrainConfig, evaluate, train
from kron_fc.utils import ArgumentError, ConfigError, ShapeError, reduction, si_format


logger = logging.getLogger(__name__)

EXIT_OK, EXIT_FAILED, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2, 64
SELFTEST_SEED = 2024


class UsageError(Exception):
    """Flag combination argparse cannot check by itself."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _rank(text: str) -> int | str:
    return "full" if text == "full" else _positive_int(text)


def _shape(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(_positive_int(d) for d in text.split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected CxHxW, got {text!r}")
    if len(dims) not in (1, 3):
        raise argparse.ArgumentTypeError(f"expected C or CxHxW, got {text!r}")
    return dims


def _check_out(path: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(directory):
        raise UsageError(f"output directory {directory} does not exist")


def _config(args: argparse.Namespace) -> TrainConfig:
    try:
        with open(args.config) as file:
            text = file.read()
    except OSError as exc:
        raise UsageError(f"cannot read config {args.config}: {exc.strerror}")
    config = parse_config(text)
    overrides: dict[str, Any] = {
        "seed": args.seed,
        "epochs": args.epochs,
        "data_dir": args.data,
        "eval_workers": args.workers,
    }
    return dataclasses.replace(
        config, **{key: val for key, val in overrides.items() if val is not None}
    )


def _patch_of(model: Model) -> int | None:
    if len(model.input_shape) != 3:
        return None
    return math.isqrt(model.input_shape[0])


def _fit(
    model: Model, config: TrainConfig, rng: Rng, progress: bool
) -> dict[str, Any]:
    train_set, val_set, test_set = load_mnist(
        config.data_dir, config.validation_size, _patch_of(model)
    )

    def report_epoch(epoch: int, loss: float, val_error: float) -> None:
        print(
            f"epoch {epoch} train_loss {loss:.6f} val_error {val_error:.4f}",
            flush=True,
        )

    result = train(model, train_set, val_set, config, rng, report_epoch, progress)
    model.restore(result.snapshot)
    test_error = evaluate(model, test_set, workers=config.eval_workers)
    print(
        f"best_epoch {result.best_epoch} val_error {result.best_val_error:.4f} "
        f"test_error {test_error:.4f}"
    )
    return {
        "seed": config.seed,
        "epoch": result.best_epoch,
        "val_error": result.best_val_error,
        "test_error": test_error,
    }


def cmd_train(args: argparse.Namespace) -> int:
    config = _config(args)
    _check_out(args.out)
    init_rng, train_rng = Rng(config.seed).split(2)
    model = build_model(config, init_rng)
    logger.info("training %s:\n%s", config.model, model.topology())
    meta = _fit(model, config, train_rng, args.progress)
    meta = {"method": config.model, "preset_version": PRESET_VERSION, **meta}
    save_checkpoint(args.out, model, meta)
    return EXIT_OK


def cmd_finetune(args: argparse.Namespace) -> int:
    config = _config(args)
    _check_out(args.out)
    expected = build_model(config, Rng(config.seed)).topology()
    model, old_meta = load_checkpoint(args.source, expect_topology=expected)
    meta = _fit(model, config, Rng(config.seed), args.progress)
    method = old_meta.get("method", config.model)
    meta = {"method": method, "finetuned_from": args.source, **meta}
    save_checkpoint(args.out, model, meta)
    return EXIT_OK


def _validate_compress(args: argparse.Namespace) -> None:
    if args.formulation != "KFCM":
        missing = [flag for flag in ("k1", "k2") if getattr(args, flag) is None]
        if missing:
            raise UsageError(
                f"formulation {args.formulation} requires "
                + ", ".join(f"--{flag}" for flag in missing)
            )
        if args.c1 is not None:
            raise UsageError("--c1 only applies to formulation KFCM")
    elif args.k2 is not None:
        raise UsageError("formulation KFCM takes --c1 and --k1 only")
    if (args.formulation == "I") != (args.k3 is not None):
        raise UsageError("--k3 is required for formulation I and only allowed there")
    _check_out(args.out)


def _compress_spec(
    args: argparse.Namespace, shape: tuple[int, ...], out_dim: int
) -> kfc.KfcSpec:
    in_dim = math.prod(shape)

    def build(rank: int) -> kfc.KfcSpec:
        if args.formulation == "KFCM":
            return kfc.make_spec_kfcm(in_dim, out_dim, args.c1, args.k1, rank)
        if len(shape) != 3:
            raise ShapeError(
                f"formulation {args.formulation} needs a CxHxW input, "
                "pass --input-shape"
            )
        outs = [args.k1, args.k2] + ([args.k3] if args.k3 is not None else [])
        dims = (*shape, out_dim)
        return kfc.make_spec_formulation(args.formulation, dims, outs, rank)

    if args.rank != "full":
        return build(args.rank)
    # NKP rank is bounded by the smaller side of the rearranged matrix
    (rows_a, cols_a), *rest = build(1).groups[0].shape.factors
    rest_size = math.prod(r * c for r, c in rest)
    return build(min(rows_a * cols_a, rest_size))


def cmd_compress(args: argparse.Namespace) -> int:
    _validate_compress(args)
    model, meta = load_checkpoint(args.source)
    try:
        dense = model[args.layer]
    except KeyError:
        raise KeyError(
            f"layer {args.layer!r} not found, model has "
            f"{[name for name, _ in model.layers]}"
        )
    if not isinstance(dense, Dense):
        raise ArgumentError(f"layer {args.layer!r} is {dense.kind}, not dense")

    first = next(name for name, layer in model.layers if layer.params())
    shape = args.input_shape or (
        model.input_shape if first == args.layer else (dense.in_dim,)
    )
    if math.prod(shape) != dense.in_dim:
        raise ShapeError(f"input shape {shape} does not hold {dense.in_dim} inputs")

    spec = _compress_spec(args, shape, dense.out_dim)
    weights = compress_fc(dense.weight, dense.bias, spec)
    norm = np.linalg.norm(dense.weight)
    residual = np.linalg.norm(dense.weight - kfc.materialize(spec, weights))
    rel_residual = float(residual / norm) if norm > 0 else 0.0

    layers = [
        (name, KfcLayer(spec, weights) if name == args.layer else layer)
        for name, layer in model.layers
    ]
    compressed = Model(layers, model.input_shape)
    before = sum(arr.size for arr in dense.params())
    factors = kfc.count_params(spec)
    print(
        f"layer {args.layer}: dense {dense.in_dim}x{dense.out_dim} "
        f"-> kfc {spec.describe()}"
    )
    print(
        f"params {si_format(before)} -> {si_format(factors + spec.out_dim)} "
        f"(factors {si_format(factors)}, reduction {reduction(factors, before):.1f}%)"
    )
    print(f"rel_residual {rel_residual:.6e}")

    kept = {k: v for k, v in meta.items() if k not in ("val_error", "test_error")}
    kept.update(
        method=f"KFC-{args.formulation}-rank{spec.total_rank}",
        compressed_layer=args.layer,
        rel_residual=rel_residual,
    )
    save_checkpoint(args.out, compressed, kept)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    model, meta = load_checkpoint(args.ckpt)
    _, _, test_set = load_mnist(args.data, patch=_patch_of(model))
    error = evaluate(model, test_set, workers=args.workers)
    print(f"test_error {error:.4f}")
    return EXIT_OK


def _warn_topology(base: Model, other: Model, path: str) -> None:
    def lines(model: Model) -> dict[str, str]:
        return {
            name: f"{layer.kind} {layer.describe()}".strip()
            for name, layer in model.layers
        }

    left, right = lines(base), lines(other)
    for name in sorted(set(left) | set(right)):
        if left.get(name) != right.get(name):
            logger.warning(
                "%s: layer %s differs from baseline: %s vs %s",
                path,
                name,
                left.get(name, "absent"),
                right.get(name, "absent"),
            )


def cmd_report(args: argparse.Namespace) -> int:
    if args.published is not None:
        if args.ckpt or args.baseline:
            raise UsageError("--published cannot be combined with checkpoints")
        if args.published == "chinese":
            table = chinese_table()
            sys.stdout.write(
                table.to_csv(sep="\t", index=False)
                if args.format == "tsv"
                else table.to_string(index=False) + "\n"
            )
            return EXIT_OK
        rows = mnist_table() if args.published == "mnist" else svhn_table()
        sys.stdout.write(emit_report(rows, args.format))
        return EXIT_OK

    paths = ([args.baseline] if args.baseline else []) + [
        path for path in args.ckpt or [] if path != args.baseline
    ]
    if not paths:
        raise UsageError("report needs --ckpt, --baseline or --published")
    loaded = [(path, *load_checkpoint(path)) for path in paths]
    base_model = loaded[0][1]
    rows = []
    for path, model, meta in loaded:
        if model is not base_model:
            _warn_topology(base_model, model, path)
        test_error = meta.get("test_error")
        rows.append(
            ReportRow(
                str(meta.get("method", os.path.basename(path))),
                replaced_layer_params(model, args.layer),
                model_params(model),
                float(test_error) if test_error is not None else None,
            )
        )
    sys.stdout.write(emit_report(rows, args.format))
    return EXIT_OK


def cmd_selftest(args: argparse.Namespace) -> int:
    seed = args.seed
    if seed is None:
        try:
            seed = int(os.environ.get("KFC_SEED", SELFTEST_SEED))
        except ValueError:
            raise ConfigError(
                f"KFC_SEED must be an integer, got {os.environ['KFC_SEED']!r}"
            )
    return EXIT_OK if run_selftest(print, seed) else EXIT_FAILED


def _train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="key=value config file")
    parser.add_argument("--data", help="MNIST directory, overrides data_dir")
    parser.add_argument("--out", required=True, help="checkpoint to write")
    parser.add_argument("--seed", type=int, help="overrides config seed and KFC_SEED")
    parser.add_argument("--epochs", type=int, help="overrides config epochs")
    parser.add_argument("--workers", type=_positive_int, help="evaluation threads")
    parser.add_argument("--progress", action="store_true", help="show progress bars")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kron-fc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO")
    verbs = parser.add_subparsers(dest="verb", required=True)

    compress = verbs.add_parser("compress", help="replace a dense layer by NKP")
    compress.add_argument("--in", dest="source", required=True, help="input checkpoint")
    compress.add_argument("--layer", required=True)
    compress.add_argument("--formulation", required=True, choices=kfc.FORMULATIONS)
    compress.add_argument("--k1", type=_positive_int)
    compress.add_argument("--k2", type=_positive_int)
    compress.add_argument("--k3", type=_positive_int)
    compress.add_argument("--c1", type=_positive_int, help="KFCM input factor")
    compress.add_argument("--rank", type=_rank, default=1, help="integer or 'full'")
    compress.add_argument("--input-shape", type=_shape, help="CxHxW of the layer input")
    compress.add_argument("--out", required=True)
    compress.set_defaults(run=cmd_compress)

    train_verb = verbs.add_parser("train", help="train a preset from scratch")
    _train_flags(train_verb)
    train_verb.set_defaults(run=cmd_train)

    finetune = verbs.add_parser("finetune", help="continue training a checkpoint")
    finetune.add_argument("--from", dest="source", required=True)
    _train_flags(finetune)
    finetune.set_defaults(run=cmd_finetune)

    evaluate_verb = verbs.add_parser("eval", help="test error of a checkpoint")
    evaluate_verb.add_argument("--ckpt", required=True)
    evaluate_verb.add_argument("--data", required=True)
    evaluate_verb.add_argument("--workers", type=_positive_int, default=1)
    evaluate_verb.set_defaults(run=cmd_eval)

    report = verbs.add_parser("report", help="parameter and error comparison table")
    report.add_argument("--ckpt", action="append", help="repeatable")
    report.add_argument("--baseline", help="checkpoint reductions refer to")
    report.add_argument("--layer", default="fc1", help="layer compared across models")
    report.add_argument("--published", choices=("mnist", "svhn", "chinese"))
    report.add_argument("--format", choices=("table", "tsv"), default="table")
    report.set_defaults(run=cmd_report)

    selftest = verbs.add_parser("selftest", help="run the fast invariant suite")
    selftest.add_argument(
        "--seed", type=int, help=f"overrides KFC_SEED, default {SELFTEST_SEED}"
    )
    selftest.set_defaults(run=cmd_selftest)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.run(args)
    except (UsageError, ConfigError) as exc:
        print(f"kron-fc {args.verb}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyError as exc:
        print(f"kron-fc {args.verb}: error: {exc.args[0]}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, ArithmeticError, NotImplementedError) as exc:
        logger.debug("%s failed", args.verb, exc_info=True)
        print(f"kron-fc {args.verb}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
