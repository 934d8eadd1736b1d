"""DGCNN and Geometric Attention segmentation networks with normals / sharp heads."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .attention import (
    AttentionState,
    LayerParams,
    NeighborGraph,
    edge_conv,
    fusion_scores,
    geometric_attention,
    knn_from_scores,
    proximity_matrix,
    semantic_attention,
    semantic_update,
)
from .data.patch import FormatError, UnsupportedVersionError, _Reader
from .tensor import Tensor

ARCHS = ("dgcnn", "ga")
TASKS = ("normals", "sharp")
NORM_TOLERANCE = 1e-3


class PreconditionError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "ga"
    task: str = "normals"
    k: int = 20
    widths: tuple[int, ...] = (64, 64, 64)
    semantic_width: int = 64
    global_width: int = 256
    head_widths: tuple[int, ...] = (256, 128)
    leaky_slope: float = T.DEFAULT_SLOPE
    ga_weighted_aggregation: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "head_widths", tuple(int(w) for w in self.head_widths))
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if any(w < 1 for w in self.widths + self.head_widths) or self.global_width < 1:
            raise ValueError("layer widths must be positive")
        if self.semantic_width < 1:
            raise ValueError("semantic_width must be positive")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError("leaky_slope must lie in (0, 1)")

    @property
    def n_layers(self) -> int:
        return len(self.widths)

    @property
    def out_width(self) -> int:
        return 3 if self.task == "normals" else 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["head_widths"] = list(self.head_widths)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


Weights = dict  # ordered name -> np.ndarray


def layer_shapes(config: ModelConfig) -> dict[str, list[tuple[int, int]]]:
    """(in, out) of every affine map, grouped by MLP name, in canonical order."""
    mlps: dict[str, list[tuple[int, int]]] = {}
    width = 3
    sw = config.semantic_width
    for layer, out in enumerate(config.widths):
        if config.arch == "ga":
            sem_in = width if layer == 0 else width + sw
            mlps[f"sem{layer}"] = [(sem_in, sw), (sw, sw)]
            mlps[f"query{layer}"] = [(sw, sw), (sw, sw)]
            mlps[f"key{layer}"] = [(sw, sw), (sw, sw)]
        mlps[f"edge{layer}"] = [(2 * width, out), (out, out)]
        width = out
    point_width = sum(config.widths) if config.widths else 3
    mlps["global"] = [(point_width, config.global_width)]
    dims = [point_width + config.global_width, *config.head_widths, config.out_width]
    mlps["head"] = list(zip(dims[:-1], dims[1:]))
    return mlps


def parameter_count(config: ModelConfig) -> int:
    return sum(i * o + o for shapes in layer_shapes(config).values() for i, o in shapes)


def init_weights(config: ModelConfig, dtype=np.float32) -> Weights:
    """Fan-in scaled uniform weights (He bound for LeakyReLU), zero biases.

    Deterministic in ``config.seed``.
    """
    rng = np.random.default_rng(config.seed)
    gain = np.sqrt(2.0 / (1.0 + config.leaky_slope**2))
    weights: Weights = {}
    for name, shapes in layer_shapes(config).items():
        for i, (fan_in, fan_out) in enumerate(shapes):
            bound = gain * np.sqrt(3.0 / fan_in)
            weights[f"{name}.w{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
            weights[f"{name}.b{i}"] = np.zeros(fan_out, dtype=dtype)
    return weights


def _as_params(weights: Mapping) -> dict[str, Tensor]:
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in weights.items()}


def _mlp(params: Mapping[str, Tensor], name: str) -> LayerParams:
    layers = []
    i = 0
    while f"{name}.w{i}" in params:
        layers.append((params[f"{name}.w{i}"], params[f"{name}.b{i}"]))
        i += 1
    if not layers:
        raise KeyError(f"weights have no MLP named {name!r}")
    return LayerParams(name, layers)


@dataclass
class PointPredictions:
    output: Tensor
    task: str
    attention: list[AttentionState] = field(default_factory=list)
    graphs: list[NeighborGraph] = field(default_factory=list)

    @property
    def normals(self) -> np.ndarray:
        return self.output.data

    @property
    def sharp_logits(self) -> np.ndarray:
        return self.output.data


def forward(points, weights: Mapping, config: ModelConfig, trace: bool = False) -> PointPredictions:
    """Run the network on one normalized patch.

    ``weights`` maps names to arrays or to leaf Tensors (pass Tensors with
    ``requires_grad`` to train). With ``trace`` the per-layer proximity,
    semantic and Geometric Attention matrices are retained.
    """
    params = _as_params(weights)
    dtype = next(iter(params.values())).dtype
    pts = np.asarray(points.data if isinstance(points, Tensor) else points)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise PreconditionError(f"points must be n x 3, got {pts.shape}")
    n = len(pts)
    if not 1 <= config.k <= n - 1:
        raise PreconditionError(f"k={config.k} needs at least {config.k + 1} points, got {n}")
    max_norm = float(np.linalg.norm(pts.astype(np.float64), axis=1).max())
    if max_norm > 1.0 + NORM_TOLERANCE:
        raise PreconditionError(f"patch is not normalized to the unit ball (max norm {max_norm:.6g})")
    slope = config.leaky_slope

    x = points if isinstance(points, Tensor) else Tensor(pts.astype(dtype))
    f = None
    layer_out = []
    states: list[AttentionState] = []
    graphs: list[NeighborGraph] = []
    for layer in range(config.n_layers):
        pm = proximity_matrix(x)
        slot_weights = None
        if config.arch == "ga":
            f = semantic_update(x, f, _mlp(params, f"sem{layer}"), slope=slope)
            sa = semantic_attention(f, _mlp(params, f"query{layer}"), _mlp(params, f"key{layer}"),
                                    t=config.semantic_width, slope=slope)
            graph = knn_from_scores(fusion_scores(sa.data, pm.data), config.k)
            if trace or config.ga_weighted_aggregation:
                ga = geometric_attention(sa, pm)
            if config.ga_weighted_aggregation:
                picked = T.take_along_rows(ga, graph.neighbors)
                total = picked.data.sum(axis=1, keepdims=True)
                slot_weights = T.scale(_divide_rows(picked, total), float(config.k))
            if trace:
                states.append(AttentionState(layer, pm.data.copy(), sa.data.copy(), ga.data.copy()))
        else:
            graph = knn_from_scores(pm.data, config.k)
            if trace:
                states.append(AttentionState(layer, pm.data.copy()))
        graphs.append(graph)
        x = edge_conv(x, graph, _mlp(params, f"edge{layer}"), slope, slot_weights)
        layer_out.append(x)

    feats = T.concat(layer_out, axis=1) if layer_out else x
    glob = T.leaky_relu(_mlp(params, "global")(feats, slope), slope)
    glob = T.broadcast_rows(T.reduce_max_rows(glob), n)
    out = _mlp(params, "head")(T.concat([feats, glob], axis=1), slope)
    if config.task == "normals":
        out = T.l2_normalize_rows(out)
    else:
        out = T.reshape(out, (n,))
    return PointPredictions(out, config.task, states, graphs)


def _divide_rows(m: Tensor, total: np.ndarray) -> Tensor:
    """m / rowsum(m), differentiating through the row sums."""
    s = total
    data = m.data / s

    def bw(g):
        return (g / s - (g * m.data).sum(axis=1, keepdims=True) / (s * s),)

    return T._make(data, (m,), bw, "divide_rows")


# ---------------------------------------------------------------------------
# GACK checkpoints

CKPT_MAGIC = b"GACK"
CKPT_VERSION = 1


def checkpoint_to_bytes(weights: Mapping[str, np.ndarray], config: Mapping) -> bytes:
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(blob)), blob]
    for name, arr in weights.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


def checkpoint_from_bytes(buf: bytes) -> tuple[Weights, dict]:
    r = _Reader(buf)
    if r.take(4, "magic") != CKPT_MAGIC:
        raise FormatError("bad magic, not a GACK checkpoint", 0)
    version = r.u32("version")
    if version != CKPT_VERSION:
        raise UnsupportedVersionError(f"unsupported GACK version {version}", 4)
    blob_len = r.u32("config length")
    at = r.pos
    try:
        config = json.loads(r.take(blob_len, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"config is not valid UTF-8 JSON: {exc}", at) from None
    weights: Weights = {}
    while r.pos < len(buf):
        at = r.pos
        name_len = r.u32("record name length")
        name = r.take(name_len, "record name").decode("utf-8", errors="strict")
        if name in weights:
            raise FormatError(f"duplicate record {name!r}", at)
        rank = r.u32("rank")
        shape = tuple(r.u32("extent") for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(4 * count, f"data of {name!r}"), dtype="<f4")
        weights[name] = data.reshape(shape).astype(np.float32)
    return weights, config


def save_checkpoint(path, weights: Mapping[str, np.ndarray], config: Mapping) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(weights, config))


def load_checkpoint(path) -> tuple[Weights, dict]:
    return checkpoint_from_bytes(Path(path).read_bytes())
