"""Proximity, semantic attention, Geometric Attention fusion, kNN graphs and EdgeConv."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

SEMANTIC_EPS = 1e-12


@dataclass
class NeighborGraph:
    """Row i lists the k selected neighbours of point i, best score first."""

    neighbors: np.ndarray

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]

    def __len__(self) -> int:
        return self.neighbors.shape[0]


@dataclass
class AttentionState:
    """Matrices of one layer kept for inspection (plain arrays, detached)."""

    layer_index: int
    pm: np.ndarray
    sa: np.ndarray | None = None
    ga: np.ndarray | None = None


@dataclass
class LayerParams:
    """A named MLP: affine maps with LeakyReLU between them (none after the last)."""

    name: str
    layers: Sequence[tuple[Tensor, Tensor]]

    @property
    def in_width(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def out_width(self) -> int:
        return self.layers[-1][0].shape[1]

    def __call__(self, x: Tensor, slope: float = T.DEFAULT_SLOPE) -> Tensor:
        if x.shape[-1] != self.in_width:
            raise DimensionError(f"{self.name}: input width {x.shape[-1]} != {self.in_width}")
        h = x
        for i, (w, b) in enumerate(self.layers):
            if i:
                h = T.leaky_relu(h, slope)
            h = T.add_bias(T.matmul(h, w), b)
        return h


def proximity_matrix(x) -> Tensor:
    """Negative pairwise Euclidean distances between feature rows."""
    return T.scale(T.pairwise_distance(x), -1.0)


def semantic_update(x, f_prev, params: LayerParams, eps: float = SEMANTIC_EPS,
                    slope: float = T.DEFAULT_SLOPE) -> Tensor:
    """Unit-norm semantic features from geometric features (and previous semantics)."""
    inp = T.as_tensor(x) if f_prev is None else T.concat([x, f_prev], axis=1)
    return T.l2_normalize_rows(params(inp, slope), eps)


def semantic_attention(f, params_q: LayerParams, params_k: LayerParams, t: float | None = None,
                       slope: float = T.DEFAULT_SLOPE) -> Tensor:
    """Scaled dot-product scores ``<q_i, k_j> / sqrt(t)``; ``t`` defaults to the width of ``f``."""
    f = T.as_tensor(f)
    t = float(f.shape[1] if t is None else t)
    if t <= 0:
        raise ValueError("scaling factor must be positive")
    q = params_q(f, slope)
    k = params_k(f, slope)
    return T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(t))


def geometric_attention(sa, pm) -> Tensor:
    """Row-stochastic fusion ``softmax(softmax(sa) * softmax(pm))``."""
    sa, pm = T.as_tensor(sa), T.as_tensor(pm)
    if sa.shape != pm.shape:
        raise DimensionError(f"geometric_attention: {sa.shape} vs {pm.shape}")
    return T.softmax_rows(T.mul(T.softmax_rows(sa), T.softmax_rows(pm)))


def fusion_scores(sa: np.ndarray, pm: np.ndarray) -> np.ndarray:
    """Scores ranking each row exactly as the Geometric Attention matrix does.

    Within a row, ``softmax(sa) * softmax(pm)`` is proportional to
    ``exp(sa + pm)`` and the outer softmax is monotone, so ``sa + pm`` orders
    neighbours identically without the saturation a single-precision GA
    matrix suffers.
    """
    return sa + pm


def knn_from_scores(scores, k: int) -> NeighborGraph:
    """Top-k indices per row excluding the diagonal; ties go to the lower index."""
    s = np.array(scores.data if isinstance(scores, Tensor) else scores)
    if s.dtype.kind != "f":
        s = s.astype(np.float64)
    n = s.shape[0]
    if s.ndim != 2 or s.shape[1] != n:
        raise DimensionError(f"knn_from_scores needs a square matrix, got {s.shape}")
    if not 1 <= k <= n - 1:
        raise ValueError(f"k must lie in [1, {n - 1}], got {k}")
    np.fill_diagonal(s, -np.inf)
    # k-th largest per row, then everything above it plus the lowest-index ties
    kth = -np.partition(-s, k - 1, axis=1)[:, k - 1 : k]
    above = s > kth
    ties = s == kth
    need = k - above.sum(axis=1, keepdims=True)
    chosen = above | ties
    crowded = np.flatnonzero(ties.sum(axis=1) > need[:, 0])
    if crowded.size:
        t = ties[crowded]
        chosen[crowded] = above[crowded] | (t & (np.cumsum(t, axis=1) <= need[crowded]))
    cols = np.nonzero(chosen)[1].reshape(n, k)
    picked = np.take_along_axis(s, cols, axis=1)
    order = np.argsort(-picked, axis=1, kind="stable")
    return NeighborGraph(np.take_along_axis(cols, order, axis=1).astype(np.intp))


def edge_conv(x, graph: NeighborGraph, params: LayerParams, slope: float = T.DEFAULT_SLOPE,
              slot_weights=None) -> Tensor:
    """Channel-wise max over neighbours of ``h(x_i, x_j - x_i)``, then LeakyReLU.

    ``slot_weights`` (n x k) optionally rescales each edge feature before the max.
    """
    x = T.as_tensor(x)
    n, width = x.shape
    idx = graph.neighbors
    if idx.shape[0] != n:
        raise DimensionError(f"edge_conv: graph has {idx.shape[0]} rows for {n} points")
    if 2 * width != params.in_width:
        raise DimensionError(f"edge_conv: features of width {width} do not fit {params.name}")
    k = idx.shape[1]
    # first affine map of h on concat(x_i, x_j - x_i), split as x_i (Wa - Wb) + x_j Wb
    (w0, b0), rest = params.layers[0], params.layers[1:]
    w_centre = T.sub(T.slice_rows(w0, 0, width), T.slice_rows(w0, width, 2 * width))
    w_nbr = T.slice_rows(w0, width, 2 * width)
    own = T.add_bias(T.matmul(x, w_centre), b0)
    h = T.add_to_slots(T.gather_rows(T.matmul(x, w_nbr), idx), own)
    h = T.reshape(h, (n * k, h.shape[2]))
    for w, b in rest:
        h = T.add_bias(T.matmul(T.leaky_relu(h, slope), w), b)
    h = T.reshape(h, (n, k, params.out_width))
    if slot_weights is not None:
        h = T.scale_slots(h, slot_weights)
    return T.leaky_relu(T.neighborhood_max(h, graph), slope)
