"""Losses, metrics, Adam, and the train / evaluate loops."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .data.dataset import MANIFEST
from .data.patch import FormatError, PointPatch, augment_rotate, read_patch
from .network import ModelConfig, Weights, forward, init_weights, load_checkpoint, save_checkpoint
from .tensor import Tensor

log = logging.getLogger(__name__)

UNIT_TOLERANCE = 1e-3
HIST_BINS = 64
LOG_HEADER = ("epoch", "split", "task", "metric", "value")


class DataError(RuntimeError):
    """Training data is missing, empty or corrupt."""


class TaskMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-3
    mse_weight: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    augment: bool = True
    oriented_rmse: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.mse_weight < 0:
            raise ValueError("mse_weight must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# losses


def _check_unit(x: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(np.asarray(x, dtype=np.float64), axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOLERANCE):
        raise ValueError(f"{what} rows must be unit vectors (worst norm {norms[np.argmax(np.abs(norms - 1))]:.6g})")


def angular_loss(pred, gt) -> Tensor:
    """Mean over points of ``1 - <pred_i, gt_i>^2``; blind to the sign of either normal."""
    pred = T.as_tensor(pred)
    gt_arr = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=pred.dtype)
    _check_unit(pred.data, "prediction")
    _check_unit(gt_arr, "ground truth")
    cos2 = T.square(T.row_dot(pred, gt_arr))
    return T.add(T.scale(T.mean(cos2), -1.0), np.asarray(1.0, dtype=pred.dtype))


def normals_objective(pred, gt, mse_weight: float = 0.01) -> Tensor:
    """Angular loss plus ``mse_weight`` times the mean squared difference over all n x 3 entries."""
    pred = T.as_tensor(pred)
    gt_arr = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=pred.dtype)
    loss = angular_loss(pred, gt_arr)
    if mse_weight == 0:
        return loss
    mse = T.mean(T.square(T.sub(pred, gt_arr)))
    return T.add(loss, T.scale(mse, mse_weight))


def bce_loss(logits, labels) -> Tensor:
    return T.bce_with_logits(logits, labels)


# ---------------------------------------------------------------------------
# metrics (plain arrays)


def sigmoid(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def pointwise_angular(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    dots = (np.asarray(pred, np.float64) * np.asarray(gt, np.float64)).sum(axis=1)
    return np.clip(1.0 - dots * dots, 0.0, 1.0)


def balanced_accuracy(pred_prob, labels, threshold: float = 0.5) -> float:
    """Mean of true-positive and true-negative rates; one-class inputs use the defined rate."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    pred = np.asarray(pred_prob) > threshold
    lab = np.asarray(labels).astype(bool)
    pos, neg = lab.sum(), (~lab).sum()
    rates = []
    if pos:
        rates.append((pred & lab).sum() / pos)
    if neg:
        rates.append((~pred & ~lab).sum() / neg)
    return float(np.mean(rates)) if rates else 1.0


def rmse_metric(pred, gt, oriented: bool = False) -> float:
    """Root mean squared difference over all entries.

    Unless ``oriented``, each predicted normal is flipped to agree in sign
    with its ground truth first.
    """
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    if not oriented:
        flip = (p * g).sum(axis=1) < 0
        p = np.where(flip[:, None], -p, p)
    return float(np.sqrt(((p - g) ** 2).mean()))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(weights: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray | None],
              state: AdamState, config: TrainConfig) -> tuple[Weights, AdamState]:
    """One bias-corrected Adam update; returns new weights and state, inputs untouched."""
    b1, b2 = config.beta1, config.beta2
    t = state.step + 1
    new_w: Weights = {}
    new_state = AdamState({}, {}, t)
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, w in weights.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(w)
        if g.shape != w.shape:
            raise T.DimensionError(f"gradient for {name} has shape {g.shape}, weight {w.shape}")
        m = state.m.get(name, np.zeros_like(w))
        v = state.v.get(name, np.zeros_like(w))
        m = (b1 * m + (1.0 - b1) * g).astype(w.dtype)
        v = (b2 * v + (1.0 - b2) * g * g).astype(w.dtype)
        step = config.lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
        new_w[name] = (w - step).astype(w.dtype)
        new_state.m[name] = m
        new_state.v[name] = v
    return new_w, new_state


# ---------------------------------------------------------------------------
# training


def patch_loss(patch: PointPatch, params: Mapping, model: ModelConfig, mse_weight: float) -> Tensor:
    out = forward(patch.points, params, model).output
    if model.task == "normals":
        return normals_objective(out, patch.normals, mse_weight)
    return bce_loss(out, patch.sharp)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, 1, epoch])).permutation(n)


def augment_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, 2, epoch, index]).generate_state(1)[0])


def check_task(patches: Sequence[PointPatch], task: str, names: Sequence[str] | None = None) -> None:
    attr = "normals" if task == "normals" else "sharp"
    for i, p in enumerate(patches):
        if getattr(p, attr) is None:
            who = names[i] if names else f"patch {i}"
            raise TaskMismatchError(f"{who} has no {attr} labels for task {task!r}")


@dataclass
class FitResult:
    weights: Weights
    best_weights: Weights
    best_epoch: int
    log_rows: list[tuple]
    step_losses: list[float]


def fit(model: ModelConfig, config: TrainConfig, train: Sequence[PointPatch],
        val: Sequence[PointPatch] = (), weights: Weights | None = None,
        max_steps: int | None = None,
        on_step: Callable[[int, Weights], bool] | None = None) -> FitResult:
    """Train in memory; validation (if any) after every epoch picks the best weights.

    ``on_step(step, weights)`` may return True to stop early.
    """
    if not train:
        raise DataError("training split is empty")
    check_task(train, model.task)
    check_task(val, model.task)
    weights = init_weights(model) if weights is None else dict(weights)
    state = AdamState()
    best = dict(weights)
    best_epoch = 0
    best_score = -math.inf
    rows: list[tuple] = []
    step_losses: list[float] = []
    stop = False
    for epoch in range(1, config.epochs + 1):
        order = epoch_order(config.seed, epoch, len(train))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            params = {k: Tensor(v, requires_grad=True) for k, v in weights.items()}
            total = 0.0
            for idx in batch:
                patch = train[idx]
                if config.augment:
                    patch = augment_rotate(patch, augment_seed(config.seed, epoch, int(idx)))
                loss = patch_loss(patch, params, model, config.mse_weight)
                T.backward(loss, 1.0 / len(batch))
                total += loss.item()
            batch_loss = total / len(batch)
            step_losses.append(batch_loss)
            epoch_losses.append(batch_loss)
            grads = {k: p.grad for k, p in params.items()}
            weights, state = adam_step(weights, grads, state, config)
            if on_step is not None and on_step(state.step, weights):
                stop = True
            if max_steps is not None and state.step >= max_steps:
                stop = True
            if stop:
                break
        rows.append((epoch, "train", model.task, "loss", float(np.mean(epoch_losses))))
        if val:
            report = evaluate(weights, model, val, oriented_rmse=config.oriented_rmse)
            for name, value in report.aggregate.items():
                rows.append((epoch, "val", model.task, name, value))
            score = report.selection_score
            if score > best_score:
                best_score, best, best_epoch = score, dict(weights), epoch
        else:
            best, best_epoch = dict(weights), epoch
        log.info("epoch %d: %s", epoch, rows[-1])
        if stop:
            break
    return FitResult(weights, best, best_epoch, rows, step_losses)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class MetricsReport:
    task: str
    split: str
    ids: list[str]
    per_patch: dict[str, list[float]]
    aggregate: dict[str, float]
    histograms: dict[str, dict[str, list]]

    @property
    def selection_score(self) -> float:
        if self.task == "normals":
            return -self.aggregate["angular_loss"]
        return self.aggregate["balanced_accuracy"]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


METRIC_RANGES = {
    "angular_loss": (0.0, 1.0),
    "rmse": (0.0, 2.0 / math.sqrt(3.0)),
    "balanced_accuracy": (0.0, 1.0),
}


def _histogram(values, lo: float, hi: float) -> dict[str, list]:
    vals = np.clip(np.asarray(values, dtype=np.float64), lo, hi)
    counts, edges = np.histogram(vals, bins=HIST_BINS, range=(lo, hi))
    return {"edges": edges.tolist(), "counts": counts.astype(int).tolist()}


def evaluate(weights: Mapping, model: ModelConfig, patches: Sequence[PointPatch],
             ids: Sequence[str] | None = None, split: str = "", oriented_rmse: bool = False,
             predictor: Callable[[PointPatch], np.ndarray] | None = None) -> MetricsReport:
    """Per-patch metrics, their means, and 64-bin histograms.

    ``predictor`` replaces the network (it returns unit normals for the
    normals task, sharp probabilities for the sharp task).
    """
    check_task(patches, model.task, ids)
    ids = [str(i) for i in (ids if ids is not None else range(len(patches)))]
    per: dict[str, list[float]] = {}
    point_errors = []
    for patch in patches:
        if predictor is not None:
            out = np.asarray(predictor(patch))
        else:
            with T.no_grad():
                out = forward(patch.points, weights, model).output.data
        if model.task == "normals":
            errs = pointwise_angular(out, patch.normals)
            point_errors.append(errs)
            per.setdefault("angular_loss", []).append(float(errs.mean()))
            per.setdefault("rmse", []).append(rmse_metric(out, patch.normals, oriented_rmse))
        else:
            prob = out if predictor is not None else sigmoid(out)
            per.setdefault("balanced_accuracy", []).append(balanced_accuracy(prob, patch.sharp))
    aggregate = {k: float(np.mean(v)) for k, v in per.items()}
    hist = {k: _histogram(v, *METRIC_RANGES[k]) for k, v in per.items()}
    if point_errors:
        hist["point_angular_loss"] = _histogram(np.concatenate(point_errors), 0.0, 1.0)
    return MetricsReport(model.task, split, ids, per, aggregate, hist)


# ---------------------------------------------------------------------------
# dataset directories

def load_split(data_dir, split: str) -> tuple[list[str], list[PointPatch]]:
    data_dir = Path(data_dir)
    man_path = data_dir / MANIFEST
    if not man_path.exists():
        raise DataError(f"{data_dir} has no {MANIFEST}")
    manifest = json.loads(man_path.read_text())
    names = manifest["splits"].get(split)
    if not names:
        raise DataError(f"split {split!r} in {man_path} is empty")
    patches = []
    for name in names:
        path = data_dir / name
        try:
            patches.append(read_patch(path))
        except FileNotFoundError:
            raise DataError(f"missing patch file {path}") from None
        except FormatError as exc:
            raise DataError(f"corrupt patch file {path}: {exc}") from None
    return list(names), patches


def write_log(path, rows: Sequence[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for epoch, split, task, metric, value in rows:
            w.writerow((epoch, split, task, metric, repr(float(value))))


CHECKPOINT_NAME = "checkpoint.gack"
LOG_NAME = "log.csv"


def checkpoint_config(model: ModelConfig, config: TrainConfig, best_epoch: int) -> dict:
    return {"model": model.to_dict(), "train": config.to_dict(), "best_epoch": best_epoch}


def train(model: ModelConfig, config: TrainConfig, data_dir, out_dir) -> FitResult:
    """Train on ``data_dir``'s train split, validate on val, write checkpoint and CSV log."""
    train_names, train_patches = load_split(data_dir, "train")
    check_task(train_patches, model.task, train_names)
    _, val_patches = load_split(data_dir, "val")
    result = fit(model, config, train_patches, val_patches)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / CHECKPOINT_NAME, result.best_weights, checkpoint_config(model, config, result.best_epoch))
    write_log(out / LOG_NAME, result.log_rows)
    return result


def evaluate_checkpoint(checkpoint, split: str, data_dir, oriented_rmse: bool | None = None,
                        predictor: Callable[[PointPatch], np.ndarray] | None = None) -> MetricsReport:
    """Load a GACK checkpoint and evaluate it on one split of ``data_dir``."""
    weights, blob = load_checkpoint(checkpoint)
    try:
        model = ModelConfig.from_dict(blob["model"])
    except (KeyError, TypeError) as exc:
        raise TaskMismatchError(f"checkpoint {checkpoint} carries no usable model config: {exc}") from None
    if oriented_rmse is None:
        oriented_rmse = bool(blob.get("train", {}).get("oriented_rmse", False))
    ids, patches = load_split(data_dir, split)
    return evaluate(weights, model, patches, ids=ids, split=split, oriented_rmse=oriented_rmse,
                    predictor=predictor)
