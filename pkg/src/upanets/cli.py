"""Command-line entry point: train, eval, landscape, params, inspect.

Every run writes a plain-text manifest echoing its full resolved
configuration into the output directory, so any result can be reproduced
from the manifest alone. Exit codes: 0 success, 2 data problems, 3
checkpoint problems, 4 usage problems.
"""

import argparse
import os
import sys

import numpy as np

from . import tensor as T
from .arch import MODEL_PRESETS, AblationSpec, UpaNetsConfig, build_upanets
from .checkpoint import load_into_model, save_checkpoint
from .data import load_cifar10, load_cifar100, normalize_images, synth_dataset
from .errors import ConfigError, FormatError, InputError, UpaError
from .landscape import (PAPER_COMPARISON_RANGE, grid_to_csv, make_directions, minmax_scale,
                        sample_grid, write_pgm)
from .tensor import Tensor
from .train import TrainConfig, efficiency, evaluate, history_csv, train

EXIT_OK = 0
EXIT_DATA = 2
EXIT_CHECKPOINT = 3
EXIT_USAGE = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


class _CommandError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _fail(code, message):
    raise _CommandError(code, message)


def _model_config(args):
    return UpaNetsConfig(
        f=MODEL_PRESETS[args.model],
        depth=args.depth,
        classes=args.classes,
        ablation=AblationSpec(use_cpa=not args.no_cpa, groups=args.groups,
                              shuffle=args.shuffle),
    )


def _write_manifest(args, extra=None):
    os.makedirs(args.out, exist_ok=True)
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    resolved["f"] = MODEL_PRESETS[args.model]
    resolved.update(extra or {})
    path = os.path.join(args.out, "manifest.txt")
    with open(path, "w") as fh:
        for key in sorted(resolved):
            fh.write(f"{key}={resolved[key]}\n")
    return path


def _load_dataset(args):
    if args.synthetic:
        return synth_dataset(classes=args.classes, n_train=args.train_limit or 500,
                             n_test=args.test_limit or 100, seed=args.seed)
    if not args.data_dir:
        _fail(EXIT_DATA, "no --data-dir given and --synthetic not set")
    loader = load_cifar100 if args.dataset == "cifar100" else load_cifar10
    try:
        ds = loader(args.data_dir)
    except FileNotFoundError as exc:
        _fail(EXIT_DATA, f"dataset not found: {exc}")
    except (OSError, FormatError) as exc:
        _fail(EXIT_DATA, f"could not read dataset: {exc}")
    if ds.classes != args.classes:
        _fail(EXIT_USAGE, f"--classes {args.classes} does not match the "
                          f"{ds.classes}-class dataset {args.dataset}")
    if args.train_limit:
        ds.train_images = ds.train_images[:args.train_limit]
        ds.train_labels = ds.train_labels[:args.train_limit]
    if args.test_limit:
        ds.test_images = ds.test_images[:args.test_limit]
        ds.test_labels = ds.test_labels[:args.test_limit]
    return ds


def _load_model_from_checkpoint(args):
    model = build_upanets(_model_config(args), seed=args.seed)
    try:
        load_into_model(args.checkpoint, model)
    except FileNotFoundError as exc:
        _fail(EXIT_CHECKPOINT, f"checkpoint not found: {exc}")
    except (OSError, FormatError) as exc:
        _fail(EXIT_CHECKPOINT, f"could not load checkpoint: {exc}")
    return model


# ---------------------------------------------------------------------------
# commands


def cmd_train(args):
    dataset = _load_dataset(args)
    model = build_upanets(_model_config(args), seed=args.seed)
    cfg = TrainConfig(lr0=args.lr0, momentum=args.momentum, weight_decay=args.weight_decay,
                      epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
                      augment=not args.no_augment)
    result = train(model, dataset, cfg, log=lambda msg: print(msg, flush=True))
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "history.csv"), "w") as fh:
        fh.write(history_csv(result.history))
    params = model.param_count()
    report = efficiency(result.best_accuracy * 100.0, params / 1e6)
    ckpt_path = os.path.join(args.out, "best.ckpt")
    save_checkpoint(ckpt_path, list(result.best_state.items()), metadata={
        "model": args.model, "classes": args.classes, "depth": args.depth,
        "seed": args.seed, "epochs": args.epochs, "best_epoch": result.best_epoch,
        "best_accuracy": result.best_accuracy, "params": params,
    })
    _write_manifest(args, extra={"params": params, "params_millions": params / 1e6,
                                 "best_accuracy": result.best_accuracy,
                                 "best_epoch": result.best_epoch,
                                 "efficiency": report.efficiency})
    print(f"params={params} ({params / 1e6:.3f}M)")
    print(f"best_test_top1={result.best_accuracy:.4f} (epoch {result.best_epoch})")
    print(f"efficiency={report.efficiency:.2f} (acc%/M params)")
    print(f"checkpoint: {ckpt_path}")
    return EXIT_OK


def cmd_eval(args):
    dataset = _load_dataset(args)
    model = _load_model_from_checkpoint(args)
    loss, acc = evaluate(model, dataset.test_images, dataset.test_labels,
                         dataset.mean, dataset.std)
    _write_manifest(args, extra={"test_loss": loss, "test_top1": acc})
    print(f"test_loss={loss:.6f} test_top1={acc:.4f}")
    return EXIT_OK


def cmd_landscape(args):
    if args.preset == "paper-comparison":
        args.range = PAPER_COMPARISON_RANGE
        args.steps = 50
    dataset = _load_dataset(args)
    model = _load_model_from_checkpoint(args)
    limit = args.eval_limit or len(dataset.test_labels)
    images = normalize_images(dataset.test_images[:limit], dataset.mean, dataset.std)
    labels = dataset.test_labels[:limit]
    d1, d2 = make_directions(model, args.seed)
    grid = sample_grid(model, (images, labels), d1, d2, args.range, steps=args.steps)
    minmax_scale(grid)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "grid.csv"), "w") as fh:
        fh.write(grid_to_csv(grid))
    write_pgm(os.path.join(args.out, "loss.pgm"), grid.scaled_loss)
    write_pgm(os.path.join(args.out, "top1_error.pgm"), grid.scaled_top1)
    _write_manifest(args, extra={"range": args.range, "steps": args.steps,
                                 "eval_size": len(labels),
                                 "nonfinite_cells": grid.nonfinite_count})
    print(f"grid {args.steps}x{args.steps} over [-{args.range}, {args.range}] "
          f"({grid.nonfinite_count} non-finite cells)")
    return EXIT_OK


def _channel_pgms(out_dir, group, maps, count):
    for idx in range(count):
        channel = maps[0, idx].astype(np.float64)
        lo, hi = channel.min(), channel.max()
        scaled = np.zeros_like(channel) if hi == lo else (channel - lo) / (hi - lo)
        write_pgm(os.path.join(out_dir, f"{group}_c{idx:03d}.pgm"), scaled)


def cmd_inspect(args):
    model = _load_model_from_checkpoint(args)
    if args.tap not in model.block_paths():
        _fail(EXIT_USAGE, f"unknown tap {args.tap!r}; valid taps: "
                          f"{', '.join(model.block_paths())}")
    if args.source == "noise":
        rng = np.random.default_rng(args.seed)
        image = rng.standard_normal((1, 3, 32, 32)).astype(np.float32)
    else:
        dataset = _load_dataset(args)
        image = normalize_images(dataset.test_images[:1], dataset.mean, dataset.std)
    parts = model.inspect_block(Tensor(image), args.tap, mode="eval")
    if parts["cpa"] is None:
        _fail(EXIT_USAGE, f"block {args.tap} was built without an attention path")
    channels = parts["conv"].shape[1]
    if args.count > channels:
        _fail(EXIT_USAGE, f"--count {args.count} exceeds the {channels} channels of {args.tap}")
    os.makedirs(args.out, exist_ok=True)
    for group in ("conv", "cpa", "sum"):
        _channel_pgms(args.out, group, parts[group].data, args.count)
    _write_manifest(args, extra={"channels": channels,
                                 "images_written": 3 * args.count})
    print(f"wrote {3 * args.count} feature maps to {args.out}")
    return EXIT_OK


def cmd_params(args):
    model = build_upanets(_model_config(args), seed=args.seed)
    summary = model.summary()
    print(summary)
    total = model.param_count()
    print(f"\ntotal parameters: {total} ({total / 1e6:.3f}M)")
    extra = {"params": total, "params_millions": total / 1e6}
    if args.accuracy is not None:
        report = efficiency(args.accuracy, total / 1e6)
        extra["efficiency"] = report.efficiency
        print(f"efficiency at {args.accuracy}% accuracy: {report.efficiency:.2f}")
    if args.accuracy_size is not None:
        acc, size = args.accuracy_size
        report = efficiency(acc, size)
        extra["efficiency_at_supplied_size"] = report.efficiency
        print(f"efficiency for (acc={acc}%, size={size}M): {report.efficiency:.2f}")
    _write_manifest(args, extra=extra)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring


def _build_parser():
    parser = _Parser(prog="upanets", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--model", choices=sorted(MODEL_PRESETS), default="upa16")
        p.add_argument("--depth", type=int, default=1, help="depth multiplier d")
        p.add_argument("--classes", type=int, default=10)
        p.add_argument("--data-dir", default=None)
        p.add_argument("--dataset", choices=["cifar10", "cifar100"], default="cifar10")
        p.add_argument("--synthetic", action="store_true",
                       help="use the built-in separable blob dataset")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None)
        p.add_argument("--train-limit", type=int, default=None)
        p.add_argument("--test-limit", type=int, default=None)
        p.add_argument("--no-cpa", action="store_true", help="drop the attention path")
        p.add_argument("--groups", type=int, default=1, help="grouped first conv per block")
        p.add_argument("--shuffle", action="store_true", help="channel shuffle between convs")
        if checkpoint:
            p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("train", help="train a model and keep the best checkpoint")
    common(p)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=100)
    p.add_argument("--lr0", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--no-augment", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(p, checkpoint=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("landscape", help="sample the loss/error landscape")
    common(p, checkpoint=True)
    p.add_argument("--range", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--preset", choices=["paper-comparison"], default=None)
    p.add_argument("--eval-limit", type=int, default=1000)
    p.set_defaults(func=cmd_landscape)

    p = sub.add_parser("inspect", help="dump per-channel feature maps of one block")
    common(p, checkpoint=True)
    p.add_argument("--tap", default="layer2.block0")
    p.add_argument("--source", choices=["image", "noise"], default="image")
    p.add_argument("--count", type=int, default=32)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("params", help="per-module parameter counts and efficiency")
    common(p)
    p.add_argument("--accuracy", type=float, default=None,
                   help="accuracy %% for the efficiency printout")
    p.add_argument("--accuracy-size", type=float, nargs=2, default=None,
                   metavar=("ACC", "SIZE_M"),
                   help="efficiency for a supplied (accuracy %%, size in millions)")
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.out is None:
        args.out = os.path.join("upanets-out", args.command)
    try:
        return args.func(args)
    except _CommandError as exc:
        print(f"upanets {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, InputError) as exc:
        print(f"upanets {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UpaError as exc:
        print(f"upanets {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
