"""Dense tensors with reverse-mode automatic differentiation.

Only the primitives the point-cloud networks need are provided. Every
primitive checks its output for non-finite values and raises
:class:`NonFiniteError` instead of letting NaN/Inf propagate.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

__all__ = [
    "Tensor",
    "DimensionError",
    "NonFiniteError",
    "no_grad",
    "backward",
    "gradcheck",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "add_bias",
    "leaky_relu",
    "softmax_rows",
    "l2_normalize_rows",
    "neighborhood_max",
    "reduce_max_rows",
    "broadcast_rows",
    "gather_rows",
    "add_to_slots",
    "slice_rows",
    "take_along_rows",
    "scale_slots",
    "concat",
    "reshape",
    "transpose",
    "row_dot",
    "square",
    "sum",
    "mean",
    "pairwise_distance",
    "bce_with_logits",
]

DEFAULT_SLOPE = 0.01


class DimensionError(ValueError):
    """Operand shapes are incompatible with the primitive."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate primitives without recording backward rules."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """An n-dimensional array node in a differentiation graph.

    ``parents`` and ``backward_fn`` are set by primitives; leaves created by
    the user have neither. ``grad`` is only populated on leaves that
    ``requires_grad`` after :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed=None) -> None:
        backward(self, seed)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # arithmetic sugar for composites in losses and tests
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    # a finite sum means every element is finite; only overflow needs the full scan
    if not np.isfinite(np.add.reduce(arr, axis=None)) and not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(data: np.ndarray, parents: Iterable[Tensor], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    parents = tuple(parents)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward_fn = None
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, seed=None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    ``seed`` scales the upstream gradient (default 1). Intermediate gradients
    are discarded once consumed; leaf gradients accumulate across calls.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    g0 = np.ones_like(loss.data) if seed is None else np.full_like(loss.data, seed)
    grads: dict[int, np.ndarray] = {id(loss): g0}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        return g @ B.T, A.T @ g

    return _make(A @ B, (a, b), bw, "matmul")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    """Element-wise product of equally shaped tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    A, B = a.data, b.data
    return _make(A * B, (a, b), lambda g: (g * B, g * A), "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_bias(x, b) -> Tensor:
    """Add a length-c vector to every row of an m x c matrix."""
    x, b = as_tensor(x), as_tensor(b)
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: {x.shape} + {b.shape}")
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)), "add_bias")


def leaky_relu(x, alpha: float = DEFAULT_SLOPE) -> Tensor:
    """``x`` where positive, ``alpha * x`` otherwise.

    The derivative at exactly zero is taken from the negative side (``alpha``).
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {alpha}")
    x = as_tensor(x)
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * alpha)
    return _make(out, (x,), lambda g: (np.where(pos, g, g * alpha),), "leaky_relu")


def softmax_rows(m) -> Tensor:
    m = as_tensor(m)
    if m.data.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got {m.shape}")
    _check_finite(m.data, "softmax_rows input")
    z = m.data - m.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _make(y, (m,), bw, "softmax_rows")


def l2_normalize_rows(m, eps: float = 1e-12) -> Tensor:
    """Divide each row by ``max(norm, eps)``; zero rows stay zero."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    m = as_tensor(m)
    if m.data.ndim != 2:
        raise DimensionError(f"l2_normalize_rows expects a matrix, got {m.shape}")
    norm = np.sqrt((m.data * m.data).sum(axis=1, keepdims=True))
    big = norm > eps
    denom = np.where(big, norm, eps).astype(m.dtype)
    y = m.data / denom

    def bw(g):
        radial = np.where(big, (y * g).sum(axis=1, keepdims=True), 0.0)
        return ((g - y * radial) / denom,)

    return _make(y, (m,), bw, "l2_normalize_rows")


def _max_axis1(values: Tensor, op: str) -> Tensor:
    v = values.data
    if v.shape[1] == 0:
        raise DimensionError(f"{op}: empty reduction axis")

    def bw(g):
        arg = v.argmax(axis=1)  # first index on ties
        gx = np.zeros_like(v)
        np.put_along_axis(gx, arg[:, None, :], g[:, None, :], axis=1)
        return (gx,)

    return _make(v.max(axis=1), (values,), bw, op)


def neighborhood_max(values, graph=None) -> Tensor:
    """Channel-wise max over the k neighbor slots of an n x k x c tensor.

    The gradient of each output goes to the first maximizing slot.
    """
    values = as_tensor(values)
    if values.data.ndim != 3:
        raise DimensionError(f"neighborhood_max expects n x k x c, got {values.shape}")
    if graph is not None:
        nbr = np.asarray(getattr(graph, "neighbors", graph))
        if nbr.shape != values.shape[:2]:
            raise DimensionError(
                f"neighborhood_max: graph {nbr.shape} vs values {values.shape[:2]}"
            )
    return _max_axis1(values, "neighborhood_max")


def reduce_max_rows(x) -> Tensor:
    """Column-wise max over the rows of an n x c matrix, returned as 1 x c."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"reduce_max_rows expects a matrix, got {x.shape}")
    return _max_axis1(reshape(x, (1,) + x.shape), "reduce_max_rows")


def broadcast_rows(x, n: int) -> Tensor:
    """Repeat a 1 x c row n times."""
    x = as_tensor(x)
    if x.data.ndim != 2 or x.shape[0] != 1:
        raise DimensionError(f"broadcast_rows expects 1 x c, got {x.shape}")
    out = np.repeat(x.data, n, axis=0)
    return _make(out, (x,), lambda g: (g.sum(axis=0, keepdims=True),), "broadcast_rows")


def gather_rows(x, index) -> Tensor:
    """``x[index]`` for an integer index array of any shape."""
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.intp)
    rows = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise IndexError(f"gather_rows: index out of range for {rows} rows")

    def bw(g):
        flat = idx.reshape(-1)
        # scatter-add as a sparse product: row r of the result sums g at positions where idx == r
        scatter = sparse.csr_matrix(
            (np.ones(flat.size, dtype=g.dtype), (flat, np.arange(flat.size))), shape=(rows, flat.size)
        )
        gx = scatter @ g.reshape(flat.size, -1)
        return (np.asarray(gx).reshape(x.shape),)

    return _make(x.data[idx], (x,), bw, "gather_rows")


def add_to_slots(slots, rows) -> Tensor:
    """Add row i of an n x c matrix to every slot (i, j) of an n x k x c tensor."""
    slots, rows = as_tensor(slots), as_tensor(rows)
    if slots.data.ndim != 3 or rows.shape != (slots.shape[0], slots.shape[2]):
        raise DimensionError(f"add_to_slots: {slots.shape} + {rows.shape}")
    return _make(
        slots.data + rows.data[:, None, :], (slots, rows), lambda g: (g, g.sum(axis=1)), "add_to_slots"
    )


def slice_rows(x, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` of a matrix."""
    x = as_tensor(x)

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _make(x.data[start:stop], (x,), bw, "slice_rows")


def take_along_rows(m, index) -> Tensor:
    """``m[i, index[i, j]]`` for an n x n matrix and n x k index."""
    m = as_tensor(m)
    idx = np.asarray(index, dtype=np.intp)
    out = np.take_along_axis(m.data, idx, axis=1)

    def bw(g):
        gm = np.zeros_like(m.data)
        np.add.at(gm, (np.arange(idx.shape[0])[:, None], idx), g)
        return (gm,)

    return _make(out, (m,), bw, "take_along_rows")


def scale_slots(values, w) -> Tensor:
    """Multiply every channel of slot (i, j) of an n x k x c tensor by w[i, j]."""
    values, w = as_tensor(values), as_tensor(w)
    if values.data.ndim != 3 or values.shape[:2] != w.shape:
        raise DimensionError(f"scale_slots: {values.shape} vs {w.shape}")
    V, W = values.data, w.data[:, :, None]
    return _make(V * W, (values, w), lambda g: (g * W, (g * V).sum(axis=2)), "scale_slots")


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    arrays = [p.data for p in parts]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def bw(g):
        return np.split(g, bounds, axis=axis)

    return _make(out, parts, bw, "concat")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {exc}") from None
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {x.shape}")
    return _make(x.data.T, (x,), lambda g: (g.T,), "transpose")


def row_dot(a, b) -> Tensor:
    """Per-row inner products of two n x d matrices, as a length-n vector."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.data.ndim != 2:
        raise DimensionError(f"row_dot: {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    return _make(
        (A * B).sum(axis=1), (a, b), lambda g: (g[:, None] * B, g[:, None] * A), "row_dot"
    )


def square(x) -> Tensor:
    x = as_tensor(x)
    X = x.data
    return _make(X * X, (x,), lambda g: (2.0 * g * X,), "square")


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    return _make(
        np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.full_like(x.data, g),), "sum"
    )


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return _make(
        np.asarray(x.data.mean(), dtype=x.dtype),
        (x,),
        lambda g: (np.full_like(x.data, g / n),),
        "mean",
    )


def pairwise_distance(x) -> Tensor:
    """Euclidean distances between the rows of an n x d matrix.

    Exactly symmetric with an exactly zero diagonal. Pairs at zero distance
    get a zero gradient.
    """
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"pairwise_distance expects a matrix, got {x.shape}")
    X = x.data
    sq = (X * X).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.maximum(d2, 0.0, out=d2)
    d = np.sqrt(d2)
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(d > 0, (g + g.T) / d, 0.0).astype(X.dtype)
        return (w.sum(axis=1)[:, None] * X - w @ X,)

    return _make(d, (x,), bw, "pairwise_distance")


def bce_with_logits(logits, labels) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against {0,1} labels."""
    z = as_tensor(logits)
    y = np.asarray(labels, dtype=z.dtype)
    if z.shape != y.shape:
        raise DimensionError(f"bce_with_logits: {z.shape} vs {y.shape}")
    Z = z.data
    per = np.maximum(Z, 0.0) - Z * y + np.log1p(np.exp(-np.abs(Z)))
    n = Z.size

    def bw(g):
        e = np.exp(-np.abs(Z))
        sig = np.where(Z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return ((sig - y) * (g / n),)

    return _make(np.asarray(per.mean(), dtype=z.dtype), (z,), bw, "bce_with_logits")


# ---------------------------------------------------------------------------
# finite-difference checking


def gradcheck(build: Callable[[Tensor], Tensor], x, h: float = 1e-5, coords=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``build`` maps a leaf tensor to an output; non-scalar outputs are summed.
    The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    ``coords`` optionally restricts the check to a subset of flat indices.
    """
    base = np.array(np.asarray(x, dtype=np.float64), copy=True)

    def scalar(arr: np.ndarray, leaf: Tensor | None = None) -> Tensor:
        t = leaf if leaf is not None else Tensor(arr)
        out = build(t)
        return out if out.data.size == 1 else sum(out)

    leaf = Tensor(base.copy(), requires_grad=True)
    out = scalar(leaf.data, leaf)
    backward(out)
    analytic = np.zeros_like(base) if leaf.grad is None else leaf.grad

    flat = base.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = scalar(base).item()
        flat[i] = orig - h
        fm = scalar(base).item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError("gradcheck: non-finite function value")
        num = (fp - fm) / (2.0 * h)
        err = abs(analytic.reshape(-1)[i] - num) / max(1.0, abs(num))
        worst = max(worst, err)
    return worst
