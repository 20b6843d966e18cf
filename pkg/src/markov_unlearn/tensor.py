"""Tape-based reverse-mode autodiff over numpy arrays.

Operations record themselves on the innermost active :class:`Tape`. Outside a
tape they just compute values, which is how evaluation runs without paying for
saved activations::

    with Tape() as tape:
        loss = ops.mean(ops.softplus(x @ w))
    backward(tape, loss)
    w.grad  # accumulated, never reset by backward

Reductions accumulate in float64 and cast back to the input dtype.
"""
from __future__ import annotations

import math
import os
from typing import Callable, Sequence

import numpy as np

# Set MARKOV_UNLEARN_DEBUG=1 to check every op output for NaN/Inf.
DEBUG = os.environ.get("MARKOV_UNLEARN_DEBUG", "") not in ("", "0")

MASK_FILL = -1e9

_tape_stack: list["Tape"] = []


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind in "biu":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.shape)

    def __float__(self) -> float:
        return self.item()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; use mul with a constant")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(shape):
    raise ShapeError(f"expected a scalar tensor, got shape {shape}")


class Tape:
    """Ordered record of primitive ops.

    Node ``i`` holds the output tensor, its inputs and a closure mapping the
    output gradient to one gradient per input. Creation order is a topological
    order, so backward just walks the list in reverse.
    """

    def __init__(self):
        self.outputs: list[Tensor] = []
        self.inputs: list[tuple] = []
        self.rules: list[Callable] = []
        self.names: list[str] = []

    def __len__(self) -> int:
        return len(self.outputs)

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.pop()

    def record(self, name: str, out: Tensor, inputs: tuple, rule: Callable) -> None:
        out.node = len(self.outputs)
        out.requires_grad = True
        self.outputs.append(out)
        self.inputs.append(inputs)
        self.rules.append(rule)
        self.names.append(name)


class no_grad:
    """Suspend recording inside an active tape."""

    def __enter__(self):
        self._saved = list(_tape_stack)
        _tape_stack.clear()

    def __exit__(self, *exc):
        _tape_stack.extend(self._saved)


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _emit(name: str, value: np.ndarray, inputs: tuple, rule: Callable) -> Tensor:
    out = Tensor(value)
    if DEBUG and not np.all(np.isfinite(value)):
        raise FloatingPointError(f"{name} produced non-finite values")
    tape = active_tape()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        tape.record(name, out, inputs, rule)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on the tape.

    Gradients add onto whatever is already stored; calling this twice without
    zeroing doubles them.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None or loss.node >= len(tape) or tape.outputs[loss.node] is not loss:
        raise ValueError("loss was not recorded on this tape")
    grads: list[np.ndarray | None] = [None] * (loss.node + 1)
    grads[loss.node] = np.ones_like(loss.data)
    for i in range(loss.node, -1, -1):
        g = grads[i]
        if g is None:
            continue
        in_grads = tape.rules[i](g)
        for inp, ig in zip(tape.inputs[i], in_grads):
            if ig is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                continue
            if inp.node is not None and inp.node < len(tape) and tape.outputs[inp.node] is inp:
                j = inp.node
                grads[j] = ig if grads[j] is None else grads[j] + ig
            else:
                ig = ig.astype(inp.data.dtype, copy=False)
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    dt = g.dtype
    lead = g.ndim - len(shape)
    if lead:
        g = g.reshape((-1,) + g.shape[lead:]).sum(axis=0, dtype=np.float64)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True, dtype=np.float64)
    return g.astype(dt, copy=False).reshape(shape)


def _val(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _check_broadcast(name, a, b):
    try:
        return np.broadcast_shapes(np.shape(a), np.shape(b))
    except ValueError:
        raise ShapeError(f"{name}: cannot broadcast {np.shape(a)} with {np.shape(b)}") from None


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    _check_broadcast("add", av, bv)
    sa, sb = np.shape(av), np.shape(bv)
    return _emit("add", av + bv, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    _check_broadcast("sub", av, bv)
    sa, sb = np.shape(av), np.shape(bv)
    return _emit("sub", av - bv, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    _check_broadcast("mul", av, bv)
    sa, sb = np.shape(av), np.shape(bv)
    return _emit("mul", av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)))


def scale(a: Tensor, c: float) -> Tensor:
    av = _val(a)
    c = av.dtype.type(c) if av.dtype.kind == "f" else c
    return _emit("scale", av * c, (a,), lambda g: (g * c,))


def sigmoid(a: Tensor) -> Tensor:
    av = _val(a)
    out = np.empty_like(av)
    pos = av >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    e = np.exp(av[~pos])
    out[~pos] = e / (1.0 + e)
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    av = _val(a)
    out = np.logaddexp(0.0, av).astype(av.dtype, copy=False)

    def rule(g):
        s = np.empty_like(av)
        pos = av >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
        e = np.exp(av[~pos])
        s[~pos] = e / (1.0 + e)
        return (g * s,)

    return _emit("softplus", out, (a,), rule)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GPT-2 tanh approximation."""
    x = _val(a)
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    inner = x * x
    inner *= x
    inner *= k
    inner += x
    inner *= c
    t = np.tanh(inner, out=inner)
    out = 1.0 + t
    out *= x
    out *= 0.5

    def rule(g):
        dinner = x * x
        dinner *= 3.0 * k
        dinner += 1.0
        dinner *= c
        sech2 = 1.0 - t * t
        sech2 *= x
        sech2 *= dinner
        sech2 += 1.0 + t
        sech2 *= 0.5
        sech2 *= g
        return (sech2,)

    return _emit("gelu", out, (a,), rule)


# linear algebra ---------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = _val(a), _val(b)
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} @ {bv.shape}")
    if bv.ndim == 2 and av.ndim > 2:
        # flattened 2-D GEMM is much faster than numpy's batched matmul path
        out = (av.reshape(-1, av.shape[-1]) @ bv).reshape(av.shape[:-1] + bv.shape[-1:])
    else:
        out = np.matmul(av, bv)

    def rule(g):
        if bv.ndim == 2:
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bv.T).reshape(av.shape)
            gb = av.reshape(-1, av.shape[-1]).T @ g2
        else:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape)
            gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)
        return ga, gb

    return _emit("matmul", out, (a, b), rule)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    av = _val(a)
    try:
        out = av.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {av.shape} as {tuple(shape)}") from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(av.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    av = _val(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(av, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    vals = [_val(t) for t in tensors]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[v.shape for v in vals]}") from None
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _emit("concat", out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


# reductions ----------------------------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    av = _val(a)
    out = av.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(av.dtype)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).astype(av.dtype),)

    return _emit("sum", np.asarray(out), (a,), rule)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    av = _val(a)
    n = av.size if axis is None else int(np.prod([av.shape[i] for i in np.atleast_1d(axis)]))
    out = av.mean(axis=axis, keepdims=keepdims, dtype=np.float64).astype(av.dtype)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, av.shape).astype(av.dtype),)

    return _emit("mean", np.asarray(out), (a,), rule)


# normalisation -------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    av = _val(a)
    z = av - av.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", out, (a,), rule)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    av = _val(a)
    x = av.astype(np.float64)
    z = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out64 = z - lse
    out = out64.astype(av.dtype)
    p = np.exp(out64)

    def rule(g):
        g64 = g.astype(np.float64)
        return ((g64 - p * g64.sum(axis=axis, keepdims=True)).astype(av.dtype),)

    return _emit("log_softmax", out, (a,), rule)


def layer_norm(a: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply elementwise affine."""
    x = _val(a)
    w, b = _val(weight), _val(bias)
    if w.shape != x.shape[-1:] or b.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: input {x.shape}, weight {w.shape}, bias {b.shape}")
    dt = x.dtype
    mu = x.mean(axis=-1, keepdims=True, dtype=np.float64).astype(dt)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True, dtype=np.float64)
    rstd = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = xc * rstd
    out = xhat * w + b
    n = x.shape[-1]

    def rule(g):
        gw = (g * xhat).reshape(-1, n).sum(axis=0, dtype=np.float64).astype(dt)
        gb = g.reshape(-1, n).sum(axis=0, dtype=np.float64).astype(dt)
        gx = g * w
        gx -= gx.mean(axis=-1, keepdims=True, dtype=np.float64).astype(dt)
        gx -= xhat * (gx * xhat).mean(axis=-1, keepdims=True, dtype=np.float64).astype(dt)
        gx *= rstd
        return gx, gw, gb

    return _emit("layer_norm", out, (a, weight, bias), rule)


# indexing ----------------------------------------------------------------------

def embedding(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids`` (any shape)."""
    tv = _val(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= tv.shape[0]):
        raise IndexError(f"embedding id out of range [0, {tv.shape[0]})")
    out = tv[ids]

    def rule(g):
        gt = np.zeros_like(tv)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, tv.shape[1]))
        return (gt,)

    return _emit("embedding", out, (table,), rule)


def gather(a: Tensor, index, axis: int = -1) -> Tensor:
    """``take_along_axis`` with the index axis squeezed away."""
    av = _val(a)
    idx = np.expand_dims(np.asarray(index), axis)
    out = np.take_along_axis(av, idx, axis=axis).squeeze(axis)

    def rule(g):
        ga = np.zeros_like(av)
        np.put_along_axis(ga, idx, np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _emit("gather", out, (a,), rule)


def causal_masked_fill(a: Tensor, fill: float = MASK_FILL) -> Tensor:
    """Replace entries above the diagonal of the trailing (T, T) block."""
    av = _val(a)
    t = av.shape[-1]
    if av.ndim < 2 or av.shape[-2] != t:
        raise ShapeError(f"causal_masked_fill needs a trailing square block, got {av.shape}")
    mask = np.triu(np.ones((t, t), dtype=bool), k=1)
    out = np.where(mask, av.dtype.type(fill), av)
    return _emit("causal_masked_fill", out, (a,), lambda g: (np.where(mask, 0, g).astype(av.dtype),))
