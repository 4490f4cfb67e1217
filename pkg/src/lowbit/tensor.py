"""Dense numpy-backed tensors with reverse-mode automatic differentiation.

The graph is built eagerly: every operation that sees at least one
gradient-requiring input records its parents and a vector-Jacobian
callback on the output node. ``backward`` orders the reachable nodes
topologically (a :class:`GradTape`) and replays them in reverse, so each
node is visited only after all of its consumers.

Tensors are treated as immutable once constructed; optimizers build
fresh leaves each step instead of mutating ``data`` in place. Compute
precision defaults to 64-bit floats. 32-bit mode exists for speed
experiments but numeric tolerances elsewhere in the toolkit assume
64-bit.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import ContractError, ShapeError

_DEFAULT_DTYPE = np.float64
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported compute dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


_uid = itertools.count()


class Tensor:
    """A dense array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "requires_grad", "grad", "uid", "_op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, *, dtype=None,
                 _op: str = "leaf", _parents: tuple = (), _vjp=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.uid = next(_uid)
        self._op = _op
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # operator sugar; the actual math lives in the module functions

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def abs(self):
        return abs_(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op, parents, vjp) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, _op=op, _parents=tuple(parents), _vjp=vjp)
    return Tensor(data, False, _op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, "add", (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, "sub", (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, "mul", (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out, "div", (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p for a constant exponent."""
    a = _lift(a)
    out = a.data ** p

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(out, "power", (a,), vjp)


def abs_(a: Tensor) -> Tensor:
    a = _lift(a)

    def vjp(g):
        return (g * np.sign(a.data),)

    return _make(np.abs(a.data), "abs", (a,), vjp)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    a = _lift(a)
    mask = a.data > 0

    def vjp(g):
        return (g * mask,)

    return _make(a.data * mask, "relu", (a,), vjp)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    a = _lift(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(out, "gelu", (a,), vjp)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    a = _lift(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _make(y, "softmax", (a,), vjp)


# ---------------------------------------------------------------------------
# quantizer building blocks


def clip(a: Tensor, lo=None, hi=None) -> Tensor:
    """Clamp to [lo, hi]. Gradient passes where lo <= a <= hi (inclusive)."""
    a = _lift(a)
    if lo is None and hi is None:
        raise ContractError("clip with neither bound")
    out = np.clip(a.data, lo, hi)
    mask = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        mask &= a.data >= lo
    if hi is not None:
        mask &= a.data <= hi

    def vjp(g):
        return (g * mask,)

    return _make(out, "clip", (a,), vjp)


def round_ste(a: Tensor) -> Tensor:
    """Round half to even; backward is the straight-through identity."""
    a = _lift(a)
    return _make(np.rint(a.data), "round_ste", (a,), lambda g: (g,))


# ---------------------------------------------------------------------------
# reductions


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=True),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).astype(a.data.dtype, copy=True),)

    return _make(out, "sum", (a,), vjp)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).astype(a.data.dtype, copy=True),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, a.shape).astype(a.data.dtype, copy=True),)

    return _make(out, "mean", (a,), vjp)


def _extreme(a: Tensor, axis, keepdims, op_name: str) -> Tensor:
    # Gradient routes to the first extremal element along the reduced
    # axis, which keeps backward deterministic under ties.
    fn = np.max if op_name == "max" else np.min
    argfn = np.argmax if op_name == "max" else np.argmin
    out = fn(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        grad = np.zeros_like(a.data)
        if axis is None:
            grad.flat[argfn(a.data)] = g
            return (grad,)
        idx = np.expand_dims(argfn(a.data, axis=axis), axis)
        gg = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(grad, idx, gg, axis=axis)
        return (grad,)

    return _make(out, op_name, (a,), vjp)


def max_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    return _extreme(_lift(a), axis, keepdims, "max")


def min_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    return _extreme(_lift(a), axis, keepdims, "min")


# ---------------------------------------------------------------------------
# shape and indexing


def reshape(a: Tensor, shape) -> Tensor:
    a = _lift(a)
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _make(out, "reshape", (a,), vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward zero-pads."""
    a = _lift(a)
    if not 0 <= start <= start + length <= a.shape[axis]:
        raise ShapeError(
            f"narrow [{start}, {start + length}) outside axis of size {a.shape[axis]}")
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def vjp(g):
        grad = np.zeros_like(a.data)
        grad[sl] = g
        return (grad,)

    return _make(a.data[sl], "narrow", (a,), vjp)


def transpose(a: Tensor, axes) -> Tensor:
    a = _lift(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inv),)

    return _make(a.data.transpose(axes), "transpose", (a,), vjp)


def take(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows along axis 0; ``indices`` may have any shape.

    Output shape is ``indices.shape + a.shape[1:]``. Backward
    scatter-adds, so repeated indices accumulate. This one primitive
    serves both embedding lookup and per-group scale expansion.
    """
    a = _lift(a)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError("take expects integer indices")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(
            f"take index out of range [0, {a.shape[0]}): "
            f"min={idx.min()} max={idx.max()}")
    out = a.data[idx]

    def vjp(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, idx.reshape(-1), g.reshape(idx.size, *a.shape[1:]))
        return (grad,)

    return _make(out, "take", (a,), vjp)


# ---------------------------------------------------------------------------
# matmul and loss


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, "matmul", (a, b), vjp)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets.

    logits: (N, V). targets: (N,) ints in [0, V). Uses a log-sum-exp
    stabilized forward; backward is (softmax - onehot) / N.
    """
    logits = _lift(logits)
    t = np.asarray(targets)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-d logits, got {logits.shape}")
    n, v = logits.shape
    if t.shape != (n,):
        raise ShapeError(f"targets shape {t.shape} does not match logits {logits.shape}")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"target id out of range [0, {v})")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=-1, keepdims=True)
    logp = x - m - np.log(z)
    out = -logp[np.arange(n), t].mean()

    def vjp(g):
        p = e / z
        p[np.arange(n), t] -= 1.0
        return (g * p / n,)

    return _make(out, "cross_entropy", (logits,), vjp)


# ---------------------------------------------------------------------------
# backward machinery


@dataclass
class GradTape:
    """Topologically ordered record of the graph reachable from a root.

    ``nodes`` lists every gradient-relevant node with parents appearing
    before consumers, so iterating in reverse visits each node after all
    of its consumers have deposited their contributions.
    """

    nodes: list

    def entries(self):
        return [(n.uid, n._op, tuple(p.uid for p in n._parents)) for n in self.nodes]


def build_tape(root: Tensor) -> GradTape:
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.uid in visited or not node.requires_grad:
            continue
        visited.add(node.uid)
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return GradTape(order)


def backward(loss: Tensor, wrt=None) -> dict:
    """Accumulate d(loss)/d(node) for the graph under ``loss``.

    Returns a map from Tensor to gradient ndarray covering every
    gradient-requiring node reached from the root; tensors passed in
    ``wrt`` are always present, with zeros if unreached. Also stores
    each gradient on ``tensor.grad``.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any gradient-requiring tensor")
    tape = build_tape(loss)
    grads = {loss.uid: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.get(node.uid)
        if g is None:
            continue
        if node._vjp is not None:
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(parent.uid)
                grads[parent.uid] = pg if acc is None else acc + pg
    result = {}
    for node in tape.nodes:
        g = grads.get(node.uid)
        if g is None:
            g = np.zeros_like(node.data)
        node.grad = g
        result[node] = g
    if wrt is not None:
        for t in wrt:
            if t not in result:
                t.grad = np.zeros_like(t.data)
                result[t] = t.grad
    return result


def finite_diff_grad(f, x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    Evaluates f once per signed perturbation of each element, so cost is
    2 * x.size forward passes. ``f`` receives a fresh Tensor sharing the
    perturbed buffer and must not mutate or retain it.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    base = np.array(x.data, dtype=np.float64, copy=True)
    flat = base.reshape(-1)
    out = np.zeros_like(flat)

    def ev():
        r = f(Tensor(base))
        return r.item() if isinstance(r, Tensor) else float(r)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = ev()
        flat[i] = orig - eps
        fm = ev()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * eps)
    return out.reshape(x.shape)
