"""Reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable operation is a module function returning a `Tensor`
node. Nodes are recorded only while a `Tape` is active, so inference paths
pay no graph cost. `Tape.backward` walks recorded nodes in reverse creation
order (a valid reverse topological order, each node exactly once) and
accumulates gradients into `Tensor.grad` buffers.

Arrays keep the dtype of their inputs; run a model in float64 for tight
finite-difference verification, float32 for training speed.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf, expit

_TAPE_STACK: list["Tape"] = []

# Additive attention bias for invalid positions. Large enough that exp()
# underflows to exactly zero after max-subtraction, small enough for float32.
NEG_INF = -1e30


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True)


def const(data, like: Tensor | None = None, dtype=None) -> Tensor:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif like is not None and arr.dtype != like.data.dtype and arr.dtype.kind == "f":
        arr = arr.astype(like.data.dtype)
    return Tensor(arr)


def zero_grads(params) -> None:
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.grad = None


class Tape:
    """Records nodes created while active; replays them backward."""

    def __init__(self):
        self._nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        if not loss.requires_grad or loss._backward is None:
            raise RuntimeError("loss was not recorded on a tape; run the forward pass first")
        if loss.data.size != 1:
            raise RuntimeError("backward needs a scalar loss")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    tape = _active_tape()
    track = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._backward = backward
        tape._nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g over the axes that broadcasting expanded to reach `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- arithmetic --------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    out = a.data * s

    def backward(g):
        _accum(a, g * s)

    return _make(out, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dims")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    return _make(out, (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(out, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def backward(g):
        _accum(a, g.transpose(inv))

    return _make(out, (a,), backward)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(out, tuple(tensors), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        _accum(a, full)

    return _make(out, (a,), backward)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape))

    return _make(np.asarray(out), (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    return scale(reduce_sum(a), 1.0 / a.data.size)


# -- table lookup ------------------------------------------------------------


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    out = table.data[ids]

    def backward(g):
        if not table.requires_grad:
            return
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        _accum(table, gt)

    return _make(out, (table,), backward)


# -- nonlinearities ----------------------------------------------------------

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        _accum(a, g * (cdf + x * pdf))

    return _make(out.astype(x.dtype, copy=False), (a,), backward)


def sin(a: Tensor) -> Tensor:
    out = np.sin(a.data)

    def backward(g):
        _accum(a, g * np.cos(a.data))

    return _make(out, (a,), backward)


def cos(a: Tensor) -> Tensor:
    out = np.cos(a.data)

    def backward(g):
        _accum(a, -g * np.sin(a.data))

    return _make(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.data).astype(a.data.dtype, copy=False)

    def backward(g):
        _accum(a, g * y * (1.0 - y))

    return _make(y, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    return _make(y, (a,), backward)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where `mask` is True with a constant; no grad flows there."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data.dtype.type(value), a.data)

    def backward(g):
        _accum(a, np.where(mask, 0.0, g).astype(a.data.dtype, copy=False))

    return _make(out, (a,), backward)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if rate <= 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate).astype(a.data.dtype)
    inv = a.data.dtype.type(1.0 / (1.0 - rate))
    out = a.data * keep * inv

    def backward(g):
        _accum(a, g * keep * inv)

    return _make(out, (a,), backward)


# -- normalization -----------------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize over the last axis, then apply gain and offset."""
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        _accum(bias, g.sum(axis=lead))
        _accum(gain, (g * xhat).sum(axis=lead))
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * (dxhat - m1 - xhat * m2))

    return _make(out.astype(x.data.dtype, copy=False), (x, gain, bias), backward)


# -- losses ------------------------------------------------------------------


def cross_entropy_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row negative log softmax probability of the target class, (N,)."""
    t = np.asarray(targets, dtype=np.int64)
    x = logits.data
    if x.ndim != 2:
        raise ValueError("logits must be (N, V)")
    if t.min(initial=0) < 0 or (t.size and t.max() >= x.shape[1]):
        raise ValueError("target id out of range")
    m = x.max(axis=1, keepdims=True)
    z = x - m
    sumexp = np.exp(z).sum(axis=1, keepdims=True)
    lse = np.log(sumexp)
    rows = np.arange(x.shape[0])
    out = (lse[:, 0] - z[rows, t]).astype(x.dtype, copy=False)

    def backward(g):
        soft = np.exp(z) / sumexp
        soft[rows, t] -= 1.0
        _accum(logits, soft * g[:, None])

    return _make(out, (logits,), backward)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-example binary cross entropy from raw logits, (N,)."""
    y = np.asarray(targets, dtype=logits.data.dtype)
    z = logits.data
    out = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def backward(g):
        _accum(logits, (expit(z) - y) * g)

    return _make(out.astype(z.dtype, copy=False), (logits,), backward)


def add_n(tensors: list[Tensor]) -> Tensor:
    out = tensors[0]
    for t in tensors[1:]:
        out = add(out, t)
    return out
