"""Command line: generate | train | eval | inspect.

Every command writes a run manifest (command, resolved config, seeds,
paths, tool version) before doing work; ``--from-manifest`` replays it.
Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import KINDS, FormatError, read_patch
from .data.dataset import generate_dataset
from .network import ModelConfig, PreconditionError, forward, load_checkpoint
from .tensor import no_grad, softmax_rows
from .training import (
    CHECKPOINT_NAME,
    LOG_NAME,
    DataError,
    TaskMismatchError,
    TrainConfig,
    evaluate_checkpoint,
    sigmoid,
    train,
)

log = logging.getLogger("geomattn")

RUN_MANIFEST = "run_manifest.json"
SPLITS = ("train", "val", "test")


class UsageError(Exception):
    """Bad flags or configuration; exit code 2."""


def _shapes(text: str) -> list[str]:
    kinds = [s.strip() for s in text.split(",") if s.strip()]
    bad = [k for k in kinds if k not in KINDS]
    if bad or not kinds:
        raise argparse.ArgumentTypeError(f"unknown shape(s) {', '.join(bad) or '(none)'}; choose from {', '.join(KINDS)}")
    return kinds


def _widths(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if any(v < 1 for v in values):
        raise argparse.ArgumentTypeError("widths must be positive")
    return values


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geomattn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"geomattn {__version__}")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic patches and a split manifest")
    g.add_argument("--shapes", type=_shapes, default=["wedge", "cylinder"], help="comma-separated kinds")
    g.add_argument("--count", type=_positive_int, default=60)
    g.add_argument("--points", type=_positive_int, default=512)
    g.add_argument("--spacing", type=float, default=0.05)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--workers", type=_positive_int, default=1)
    g.add_argument("--out", type=Path)
    g.add_argument("--from-manifest", type=Path)

    t = sub.add_parser("train", help="train a network on a generated dataset")
    t.add_argument("--data", type=Path)
    t.add_argument("--out", type=Path)
    t.add_argument("--task", choices=["normals", "sharp"], default="normals")
    t.add_argument("--arch", choices=["ga", "dgcnn"], default="ga")
    t.add_argument("--k", type=_positive_int, default=20)
    t.add_argument("--widths", type=_widths, default=[64, 64, 64])
    t.add_argument("--semantic-width", type=_positive_int, default=64)
    t.add_argument("--global-width", type=_positive_int, default=256)
    t.add_argument("--head-widths", type=_widths, default=[256, 128])
    t.add_argument("--leaky-slope", type=float, default=0.01)
    t.add_argument("--ga-weighted-aggregation", action="store_true")
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--batch-size", type=_positive_int, default=8)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--mse-weight", type=float, default=0.01)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--oriented-rmse", action="store_true")
    t.add_argument("--from-manifest", type=Path)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--data", type=Path)
    e.add_argument("--split", choices=SPLITS, default="test")
    e.add_argument("--out", type=Path, help="metrics JSON path")
    e.add_argument("--figures", type=Path, help="directory for histogram PNGs (default: next to --out)")
    e.add_argument("--oriented-rmse", action="store_true")
    e.add_argument("--from-manifest", type=Path)

    i = sub.add_parser("inspect", help="export one attention row as a PLY")
    i.add_argument("--checkpoint", type=Path)
    i.add_argument("--patch", type=Path)
    i.add_argument("--query", type=int, default=0)
    i.add_argument("--layer", type=int, default=0)
    i.add_argument("--out", type=Path, help="PLY path")
    i.add_argument("--figure", type=Path, help="PNG path (default: --out with .png)")
    i.add_argument("--from-manifest", type=Path)
    return p


REQUIRED = {
    "generate": ("out",),
    "train": ("data", "out"),
    "eval": ("checkpoint", "data", "out"),
    "inspect": ("checkpoint", "patch", "out"),
}


def _config(args: argparse.Namespace) -> dict:
    skip = {"command", "from_manifest", "log_level"}
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k not in skip}


def _manifest_path(args: argparse.Namespace) -> Path:
    if args.command in ("generate", "train"):
        return Path(args.out) / RUN_MANIFEST
    return Path(str(args.out) + ".run.json")


def write_run_manifest(args: argparse.Namespace) -> Path:
    cfg = _config(args)
    inputs = {k: cfg[k] for k in ("data", "checkpoint", "patch") if k in cfg}
    manifest = {
        "command": args.command,
        "config": cfg,
        "seeds": {k: cfg[k] for k in ("seed",) if k in cfg},
        "inputs": inputs,
        "outputs": {"out": cfg["out"]},
        "version": __version__,
    }
    path = _manifest_path(args)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def replay_args(args: argparse.Namespace) -> argparse.Namespace:
    try:
        manifest = json.loads(Path(args.from_manifest).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"--from-manifest: cannot read {args.from_manifest}: {exc}") from None
    if manifest.get("command") != args.command:
        raise UsageError(f"--from-manifest: manifest is for {manifest.get('command')!r}, not {args.command!r}")
    cfg = manifest["config"]
    for key in ("out", "data", "checkpoint", "patch", "figures", "figure"):
        if cfg.get(key) is not None:
            cfg[key] = Path(cfg[key])
    return argparse.Namespace(command=args.command, from_manifest=None, log_level=args.log_level, **cfg)


def cmd_generate(args) -> int:
    manifest = generate_dataset(args.out, args.shapes, args.count, args.points, args.spacing, args.seed, args.workers)
    splits = manifest["splits"]
    print(f"wrote {manifest['count']} patches to {args.out}")
    print("split\tcount")
    for name in SPLITS:
        print(f"{name}\t{len(splits[name])}")
    return 0


def _model_config(args) -> ModelConfig:
    return ModelConfig(
        arch=args.arch, task=args.task, k=args.k, widths=tuple(args.widths),
        semantic_width=args.semantic_width, global_width=args.global_width,
        head_widths=tuple(args.head_widths), leaky_slope=args.leaky_slope,
        ga_weighted_aggregation=args.ga_weighted_aggregation, seed=args.seed,
    )


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, mse_weight=args.mse_weight,
        seed=args.seed, augment=not args.no_augment, oriented_rmse=args.oriented_rmse,
    )


def cmd_train(args) -> int:
    result = train(_model_config(args), _train_config(args), args.data, args.out)
    print(f"checkpoint\t{Path(args.out) / CHECKPOINT_NAME}")
    print(f"log\t{Path(args.out) / LOG_NAME}")
    print(f"best_epoch\t{result.best_epoch}")
    print("epoch\tsplit\ttask\tmetric\tvalue")
    for row in result.log_rows:
        print("\t".join(str(v) for v in row))
    return 0


def cmd_eval(args) -> int:
    from .plotting import plot_histograms

    if not Path(args.checkpoint).is_file():
        raise UsageError(f"--checkpoint: {args.checkpoint} does not exist")
    report = evaluate_checkpoint(args.checkpoint, args.split, args.data,
                                 oriented_rmse=True if args.oriented_rmse else None)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n")
    fig_dir = args.figures if args.figures is not None else out.parent
    figures = plot_histograms(report.histograms, fig_dir, stem=out.stem)
    print(f"report\t{out}")
    for path in figures:
        print(f"figure\t{path}")
    print("--- aggregate ---")
    print(f"task\t{report.task}")
    print(f"split\t{report.split}")
    print(f"patches\t{len(report.ids)}")
    for name, value in sorted(report.aggregate.items()):
        print(f"{name}\t{value:.6f}")
    print("---")
    return 0


def attention_row(points: np.ndarray, weights, config: ModelConfig, query: int, layer: int):
    """(attention row, prediction) for one query point.

    GA networks export their Geometric Attention row; DGCNN exports the
    row-softmax of its proximity matrix, the only attention-like quantity it has.
    """
    n = len(points)
    if not 0 <= query < n:
        raise UsageError(f"--query: index {query} out of range for a {n}-point patch")
    if not 0 <= layer < config.n_layers:
        raise UsageError(f"--layer: index {layer} out of range for {config.n_layers} layers")
    with no_grad():
        pred = forward(points, weights, config, trace=True)
        state = pred.attention[layer]
        if state.ga is not None:
            row = state.ga[query]
        else:
            row = softmax_rows(state.pm[query : query + 1]).data[0]
    return np.asarray(row, dtype=np.float64), pred.output.data


def cmd_inspect(args) -> int:
    from .plotting import plot_attention
    from .ply import write_ply

    if not Path(args.checkpoint).is_file():
        raise UsageError(f"--checkpoint: {args.checkpoint} does not exist")
    weights, blob = load_checkpoint(args.checkpoint)
    config = ModelConfig.from_dict(blob["model"])
    patch = read_patch(args.patch)
    row, out = attention_row(patch.points, weights, config, args.query, args.layer)
    cols = {"attention": row}
    if config.task == "normals":
        cols.update(nx=out[:, 0], ny=out[:, 1], nz=out[:, 2])
    else:
        cols["sharp_prob"] = sigmoid(out)
    is_query = np.zeros(len(row))
    is_query[args.query] = 1.0
    cols["query"] = is_query
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_ply(args.out, patch.points, cols)
    figure = args.figure if args.figure is not None else Path(args.out).with_suffix(".png")
    plot_attention(patch.points, row, args.query, figure)
    print(f"ply\t{args.out}")
    print(f"figure\t{figure}")
    print("--- attention ---")
    print(f"arch\t{config.arch}")
    print(f"layer\t{args.layer}")
    print(f"query\t{args.query}")
    print(f"weight_sum\t{row.sum():.8f}")
    print(f"weight_max\t{row.max():.8f}")
    print("---")
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "inspect": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.from_manifest is not None:
            args = replay_args(args)
        missing = [f"--{k}" for k in REQUIRED[args.command] if getattr(args, k) is None]
        if missing:
            raise UsageError(f"missing required flag(s): {', '.join(missing)}")
        write_run_manifest(args)
        return COMMANDS[args.command](args)
    except (UsageError, TaskMismatchError, PreconditionError) as exc:
        print(f"geomattn {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        # invalid configuration values (lr, spacing, ...) surface as ValueError
        if isinstance(exc, FormatError):
            print(f"geomattn {args.command}: error: {exc}", file=sys.stderr)
            return 1
        print(f"geomattn {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"geomattn {args.command}: error: {exc}", file=sys.stderr)
        return 1
