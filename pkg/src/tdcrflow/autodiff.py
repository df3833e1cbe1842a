"""Dense float64 arrays with reverse-mode gradient accumulation.

A small tape: every op returns a ``Tensor`` holding the forward value, the
parent tensors and a closure that routes the output gradient to the parents.
``Tensor.backward()`` walks the tape in reverse topological order. Arrays are
numpy ``float64`` throughout; the op set is exactly what the velocity networks
need (matmul, broadcast add/mul, LayerNorm, sigmoid/SiLU/ReLU, reductions,
concat/slice, gather/scatter-mean).
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation, NumericError

DTYPE = np.float64


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` over axes that numpy broadcasting added or expanded."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Node in the computation tape. Wraps a float64 ndarray."""

    __slots__ = ("data", "grad", "name", "param", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None, name="", param=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.name = name
        self.param = param
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, check_finite: bool = True) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf.

        `self` must be scalar. Leaves bound to a Parameter additionally add
        their gradient into ``Parameter.grad``.
        """
        if self.data.size != 1:
            raise ContractViolation(f"backward() requires a scalar, got shape {self.shape}")
        order = _toposort(self)
        if check_finite:
            for node in order:
                if not np.all(np.isfinite(node.data)):
                    raise NumericError(f"non-finite forward value in node '{node.name or 'unnamed'}'")
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        if check_finite:
            for node in order:
                if node.grad is not None and not np.all(np.isfinite(node.grad)):
                    raise NumericError(f"non-finite gradient in node '{node.name or 'unnamed'}'")
        for node in order:
            if node.param is not None and node.grad is not None:
                node.param.grad += node.grad

    # operator sugar used by the network code
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def constant(data, name: str = "") -> Tensor:
    """Leaf tensor with no gradient routing."""
    return Tensor(data, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, (a, b), name="add")

    def bw(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    out._backward = bw
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data, (a, b), name="sub")

    def bw(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(-g, b.data.shape))

    out._backward = bw
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, (a, b), name="mul")

    def bw(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    out._backward = bw
    return out


NARROW_OUT_COLS = 6


def _narrow_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a @ b accumulated column-slice by column-slice in fixed k order.

    BLAS kernels for skinny outputs can round a row differently depending on
    its position in the matrix; this path makes every row's sum follow the
    same order, so permuting input rows permutes output rows bitwise.
    """
    out = np.zeros((a.shape[0], b.shape[1]), dtype=DTYPE)
    for k in range(a.shape[1]):
        out += a[:, k:k + 1] * b[k]
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ContractViolation("matmul expects 2-D operands")
    if b.data.shape[1] <= NARROW_OUT_COLS and a.data.shape[0] > 1:
        fwd = _narrow_matmul(a.data, b.data)
    else:
        fwd = a.data @ b.data
    out = Tensor(fwd, (a, b), name="matmul")

    def bw(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    out._backward = bw
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0.0), (a,), name="relu")

    def bw(g):
        a._accumulate(g * mask)

    out._backward = bw
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(s, (a,), name="sigmoid")

    def bw(g):
        a._accumulate(g * s * (1.0 - s))

    out._backward = bw
    return out


def silu(a) -> Tensor:
    """x * sigmoid(x)."""
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(a.data * s, (a,), name="silu")

    def bw(g):
        a._accumulate(g * (s * (1.0 + a.data * (1.0 - s))))

    out._backward = bw
    return out


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean, unit variance (no affine)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = Tensor(y, (a,), name="layer_norm")

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        a._accumulate(inv * (g - gm - y * gym))

    out._backward = bw
    return out


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(), (a,), name="sum")

    def bw(g):
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    out._backward = bw
    return out


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    out = Tensor(a.data.mean(), (a,), name="mean")

    def bw(g):
        a._accumulate(np.broadcast_to(g / n, a.data.shape).copy())

    out._backward = bw
    return out


def mean_all_sorted(a) -> Tensor:
    """Mean with the summands sorted first.

    The forward value is independent of element order, so reductions over
    unordered point sets stay bitwise identical under row permutations (the
    gradient of a mean does not depend on summation order).
    """
    a = as_tensor(a)
    n = a.data.size
    out = Tensor(np.sort(a.data.ravel()).sum() / n, (a,), name="mean_sorted")

    def bw(g):
        a._accumulate(np.broadcast_to(g / n, a.data.shape).copy())

    out._backward = bw
    return out


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), name="concat")
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(piece)

    out._backward = bw
    return out


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data[..., start:stop].copy(), (a,), name="slice_cols")

    def bw(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        a._accumulate(full)

    out._backward = bw
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape), (a,), name="reshape")

    def bw(g):
        a._accumulate(g.reshape(a.data.shape))

    out._backward = bw
    return out


def gather_rows(a, idx) -> Tensor:
    """Select rows by integer index; duplicated indices accumulate on backward."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(a.data[idx], (a,), name="gather_rows")

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    out._backward = bw
    return out


def scatter_mean(a, seg_ids, num_segments: int) -> Tensor:
    """Mean of rows sharing a segment id; empty segments yield zero rows.

    Deterministic for a fixed row order; permuting rows perturbs sums only at
    float round-off level.
    """
    a = as_tensor(a)
    seg_ids = np.asarray(seg_ids, dtype=np.intp)
    if seg_ids.shape[0] != a.data.shape[0]:
        raise ContractViolation("scatter_mean: one segment id per row required")
    counts = np.bincount(seg_ids, minlength=num_segments).astype(DTYPE)
    sums = np.zeros((num_segments,) + a.data.shape[1:], dtype=DTYPE)
    np.add.at(sums, seg_ids, a.data)
    denom = np.maximum(counts, 1.0).reshape((num_segments,) + (1,) * (a.data.ndim - 1))
    out = Tensor(sums / denom, (a,), name="scatter_mean")

    def bw(g):
        a._accumulate((g / denom)[seg_ids])

    out._backward = bw
    return out


class Parameter:
    """Trainable array with gradient and EMA shadow, all float64."""

    __slots__ = ("name", "value", "grad", "ema")

    def __init__(self, value, name: str):
        self.name = name
        self.value = np.ascontiguousarray(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)
        self.ema = self.value.copy()

    @property
    def shape(self):
        return self.value.shape

    def tensor(self, use_ema: bool = False) -> Tensor:
        """Leaf for a forward pass; live leaves route gradients into .grad."""
        if use_ema:
            return Tensor(self.ema, name=self.name + ".ema")
        return Tensor(self.value, name=self.name, param=self)


def forward_backward(loss: Tensor, check_finite: bool = True) -> float:
    """Backpropagate a scalar loss into Parameter.grad; return its value."""
    if not isinstance(loss, Tensor):
        raise ContractViolation("loss must be a Tensor")
    if loss.data.size != 1:
        raise ContractViolation(f"loss must be scalar, got shape {loss.shape}")
    loss.backward(check_finite=check_finite)
    return float(loss.data)


def zero_grads(params) -> None:
    for p in params:
        p.grad[...] = 0.0
