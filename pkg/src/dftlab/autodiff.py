"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation records an OpNode linking its input tensors to its output;
``backward`` linearizes the graph reachable from a scalar loss into a
ComputationRecord (topological order) and runs each node's backward rule
exactly once.

Conventions

* All values are 64-bit floats. Integer index arrays (gather, embedding)
  are plain numpy arrays, not Tensors.
* ``backward`` accumulates into ``Tensor.grad``. The caller resets grads
  explicitly (``zero_grad``) between uses; repeated backward calls without
  a reset add up.
* ``log`` clamps its input at ``LOG_FLOOR`` (1e-12) before taking the log,
  so probabilities touching zero produce a large-but-finite value instead
  of -inf. Inputs below the floor get zero gradient (the clamped branch is
  constant). This only matters for pathological inputs.
* A graph (one ComputationRecord and its Tensors) belongs to a single
  thread. There is no global tape, so independent graphs never share
  state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

LOG_FLOOR = 1e-12


def _as_array(data) -> np.ndarray:
    return np.asarray(data, dtype=np.float64)


class Tensor:
    """A dense float64 array with an optional gradient record."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[OpNode] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat view of the stored values (length == product of shape)."""
        return self.data.reshape(-1)

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def backward(self) -> None:
        backward(self)

    # --- sugar ---

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return scale(self, 1.0, shift=float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return scale(self, 1.0, shift=-float(other))

    def __rsub__(self, other):
        return scale(self, -1.0, shift=float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_const(self, float(p))

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)

    def sum(self, axis=None):
        return tensor_sum(self, axis=axis)

    def mean(self, axis=None):
        return tensor_mean(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


@dataclass
class OpNode:
    """One applied primitive: inputs, output, and its backward rule."""

    op: str
    inputs: tuple
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ComputationRecord:
    """Topologically ordered list of the ops behind one output tensor.

    Built by tracing parent links; every op appears exactly once and all
    of an op's inputs precede it in the list.
    """

    def __init__(self, nodes: list):
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    @classmethod
    def trace(cls, root: Tensor) -> "ComputationRecord":
        nodes = []
        seen, done = set(), set()
        stack = [(root, False)]
        while stack:
            t, post = stack.pop()
            if post:
                if id(t) not in done:
                    done.add(id(t))
                    if t._node is not None:
                        nodes.append(t._node)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for parent in t._node.inputs:
                    stack.append((parent, False))
        return cls(nodes)


def _make(data: np.ndarray, op: str, inputs: tuple, backward_fn) -> Tensor:
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    if out.requires_grad:
        out._node = OpNode(op, inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to the original shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(
            f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible"
        ) from None


# --- primitives ---


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def bw(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _make(a.data + b.data, "add", (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "multiply")

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return _make(a.data * b.data, "multiply", (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(
            f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"matmul: inner dimensions differ, {a.shape} vs {b.shape}"
        )

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return (ga, gb)

    return _make(np.matmul(a.data, b.data), "matmul", (a, b), bw)


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, with row-max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - inner),)

    return _make(s, "softmax-rowwise", (x,), bw)


def log(x: Tensor) -> Tensor:
    clamped = np.maximum(x.data, LOG_FLOOR)

    def bw(g):
        return (np.where(x.data >= LOG_FLOOR, g / clamped, 0.0),)

    return _make(np.log(clamped), "log", (x,), bw)


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)

    def bw(g):
        return (g * e,)

    return _make(e, "exp", (x,), bw)


def gather(x: Tensor, ids: np.ndarray) -> Tensor:
    """Pick one entry along the last axis: out[...] = x[..., ids[...]]."""
    ids = np.asarray(ids)
    if ids.shape != x.shape[:-1]:
        raise ValueError(
            f"gather: index shape {ids.shape} must match {x.shape[:-1]}"
        )
    if ids.size and (ids.min() < 0 or ids.max() >= x.shape[-1]):
        raise IndexError(
            f"gather: index out of range for last axis of size {x.shape[-1]}"
        )
    picked = np.take_along_axis(x.data, ids[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, ids[..., None], g[..., None], axis=-1)
        return (gx,)

    return _make(picked, "gather-index", (x,), bw)


def tensor_sum(x: Tensor, axis=None) -> Tensor:
    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(np.sum(x.data, axis=axis), "sum", (x,), bw)


def tensor_mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g / n, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)

    return _make(np.mean(x.data, axis=axis), "mean", (x,), bw)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if weight.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ValueError(
            f"layer-norm: weight/bias {weight.shape}/{bias.shape} "
            f"must be ({x.shape[-1]},)"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def bw(g):
        d = x.shape[-1]
        dxhat = g * weight.data
        term = dxhat - dxhat.mean(axis=-1, keepdims=True)
        term -= xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
        gx = inv * term
        axes = tuple(range(g.ndim - 1))
        gw = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        return (gx, gw, gb)

    return _make(weight.data * xhat + bias.data, "layer-norm", (x, weight, bias), bw)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    u = _GELU_C * (x.data + _GELU_K * x.data**3)
    t = np.tanh(u)

    def bw(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_K * x.data**2)
        local = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
        return (g * local,)

    return _make(0.5 * x.data * (1.0 + t), "gelu", (x,), bw)


def relu(x: Tensor) -> Tensor:
    def bw(g):
        return (g * (x.data > 0),)

    return _make(np.maximum(x.data, 0.0), "relu", (x,), bw)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inverse),)

    return _make(np.transpose(x.data, axes), "transpose", (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.shape

    def bw(g):
        return (g.reshape(old),)

    return _make(x.data.reshape(shape), "reshape", (x,), bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: out[...] = table[ids[...], :]."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValueError("embedding: ids must be integers")
    if table.data.ndim != 2:
        raise ValueError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding: id out of range for table with {table.shape[0]} rows"
        )

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(table.data[ids], "embedding-lookup", (table,), bw)


def scale(x: Tensor, a: float, shift: float = 0.0) -> Tensor:
    def bw(g):
        return (g * a,)

    return _make(a * x.data + shift, "scalar-scale", (x,), bw)


def mask_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where mask is True with a constant."""
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(mask.shape, x.shape)
    except ValueError:
        raise ValueError(
            f"mask-fill: mask shape {mask.shape} incompatible with {x.shape}"
        ) from None

    def bw(g):
        return (_unbroadcast(np.where(mask, 0.0, g), x.shape),)

    return _make(np.where(mask, value, x.data), "mask-fill", (x,), bw)


def pow_const(x: Tensor, p: float) -> Tensor:
    def bw(g):
        if p == 0.0:
            return (np.zeros_like(x.data),)
        return (g * p * x.data ** (p - 1.0),)

    return _make(x.data**p, "pow-const", (x,), bw)


def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward; the backward pass does not reach ``x`` through it.

    The result is a fresh leaf tensor (no parents, requires_grad False), so
    the traced record never visits the subgraph that produced ``x``.
    """
    return Tensor(x.data.copy())


def backward(loss: Tensor) -> ComputationRecord:
    """Backpropagate from a scalar, accumulating into each requires_grad leaf.

    Returns the ComputationRecord that was traversed. Grads add onto any
    existing ``.grad``; reset with ``zero_grad`` between independent passes.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    record = ComputationRecord.trace(loss)
    flow: dict = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        _accumulate(loss, flow[id(loss)])
    for node in reversed(record.nodes):
        g = flow.pop(id(node.output), None)
        if g is None:
            continue
        grads = node.backward(g)
        for parent, pg in zip(node.inputs, grads):
            if pg is None or not parent.requires_grad:
                continue
            _accumulate(parent, pg)
            if parent._node is not None:
                key = id(parent)
                if key in flow:
                    flow[key] = flow[key] + pg
                else:
                    flow[key] = pg
    return record


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g
