"""Dense float tensors with a record-on-execute reverse-mode autodiff tape.

Every op returns a new :class:`Tensor`.  When gradient recording is on and
any input requires grad, the result keeps references to its parents and a
closure mapping the upstream gradient to one gradient per parent.
:func:`backprop` replays those closures in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    NonFiniteError,
    TokenIndexError,
)

_grad_enabled = True
_debug = False
_default_dtype = np.dtype(np.float32)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def enable_grad() -> Iterator[None]:
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, True
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def set_debug(flag: bool) -> bool:
    """Toggle the non-finite check run after every op. Returns the old value."""
    global _debug
    prev, _debug = _debug, bool(flag)
    return prev


def debug_enabled() -> bool:
    return _debug


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new constants (e.g. float64 oracles)."""
    global _default_dtype
    prev, _default_dtype = _default_dtype, np.dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = prev


def _as_array(x) -> np.ndarray:
    if isinstance(x, np.ndarray) and x.dtype in (np.float32, np.float64):
        return x
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=_default_dtype)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        backprop(self, np.ones_like(self.data))

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self)))

    def __rsub__(self, other):
        return add(_wrap(other, self), neg(self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def _scalar_error():
    raise ContractError("item() needs a single-element tensor")


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str, force: bool = False) -> Tensor:
    if _debug and not np.isfinite(data).all():
        raise NonFiniteError(f"op '{op}' produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    track = _grad_enabled and (force or any(p.requires_grad for p in parents))
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backprop(root: Tensor, grad: np.ndarray) -> None:
    """Propagate ``grad`` from ``root`` into the ``.grad`` of every leaf that requires it."""
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): grad}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _result(data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), stable for large |x|."""
    x = a.data
    y = np.logaddexp(0, x).astype(x.dtype, copy=False)

    def backward(g):
        return (g * (0.5 * (1 + np.tanh(0.5 * x))),)

    return _result(y, (a,), backward, "softplus")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    y = 0.5 * x * (1 + t)

    def backward(g):
        dt = (1 - t * t) * _GELU_C * (1 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * dt),)

    return _result(y.astype(x.dtype, copy=False), (a,), backward, "gelu")


# ---------------------------------------------------------------- shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs ≥2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: batch extents differ, {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), backward, "matmul")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {src} -> {shape}") from exc
    return _result(data, (a,), lambda g: (g.reshape(src),), "reshape")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape
    data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).astype(a.data.dtype, copy=True),)

    return _result(np.asarray(data), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def getitem(a: Tensor, idx) -> Tensor:
    src, dtype = a.shape, a.data.dtype

    def backward(g):
        out = np.zeros(src, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _result(a.data[idx], (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat of zero tensors")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(data, tuple(tensors), backward, "concat")


def split(a: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    if sum(sizes) != a.shape[axis]:
        raise DimensionError(f"split sizes {list(sizes)} do not cover extent {a.shape[axis]}")
    ax = axis % a.ndim
    out, start = [], 0
    for n in sizes:
        sl = [slice(None)] * a.ndim
        sl[ax] = slice(start, start + n)
        out.append(getitem(a, tuple(sl)))
        start += n
    return out


# ---------------------------------------------------------------- nn ops


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    vocab = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise TokenIndexError(f"token id out of range [0, {vocab})")

    def backward(g):
        gw = np.zeros(weight.shape, dtype=weight.data.dtype)
        np.add.at(gw, ids, g)
        return (gw,)

    return _result(weight.data[ids], (weight,), backward, "embedding")


def rmsnorm(x: Tensor, weight: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    r = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    y = xd * r * weight.data
    n = xd.shape[-1]

    def backward(g):
        gw = g * weight.data
        gx = r * gw - xd * (r**3) * np.sum(gw * xd, axis=-1, keepdims=True) / n if x.requires_grad else None
        gweight = (g * xd * r).reshape(-1, n).sum(axis=0) if weight.requires_grad else None
        return gx, gweight

    return _result(y.astype(xd.dtype, copy=False), (x, weight), backward, "rmsnorm")


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` (broadcastable bool) marks allowed entries."""
    x = a.data
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    if mask is not None:
        if not np.all(np.any(np.broadcast_to(mask, x.shape), axis=-1)):
            raise ContractError("softmax mask hides an entire row")
        x = np.where(mask, x, -np.inf)
    z = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _result(y, (a,), backward, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    if x.shape[-1] < 1:
        raise DimensionError("log_softmax over an empty axis")
    z = x - np.max(x, axis=-1, keepdims=True)
    y = z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))

    def backward(g):
        return (g - np.exp(y) * np.sum(g, axis=-1, keepdims=True),)

    return _result(y, (a,), backward, "log_softmax")


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean next-token NLL over positions where ``mask`` is true.

    ``logits`` has shape ``[..., V]``; ``targets`` and ``mask`` match the
    leading shape.
    """
    V = logits.shape[-1]
    x = logits.data.reshape(-1, V)
    t = np.asarray(targets).reshape(-1)
    if t.shape[0] != x.shape[0]:
        raise DimensionError(f"{t.shape[0]} targets for {x.shape[0]} logit rows")
    m = np.ones(t.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    if m.shape != t.shape:
        raise DimensionError("mask shape does not match targets")
    count = int(m.sum())
    if count == 0:
        raise DegenerateInputError("cross_entropy: mask selects no positions")
    sel = t[m]
    if sel.size and (sel.min() < 0 or sel.max() >= V):
        raise TokenIndexError(f"target id out of range [0, {V})")
    tc = np.where(m, t, 0)
    z = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(z)
    s = np.sum(e, axis=-1, keepdims=True)
    logp = z - np.log(s)
    rows = np.arange(x.shape[0])
    nll = -logp[rows, tc]
    loss = np.asarray(np.sum(nll[m]) / count, dtype=x.dtype)
    shape = logits.shape

    def backward(g):
        p = e / s
        p[rows, tc] -= 1
        p *= (m[:, None] * (g / count)).astype(x.dtype)
        return (p.reshape(shape),)

    return _result(loss, (logits,), backward, "cross_entropy")


def checkpoint(fn: Callable[..., Tensor], *inputs: Tensor) -> Tensor:
    """Run ``fn`` without recording; recompute it during backward.

    Parameters captured by ``fn`` receive their gradients when the segment is
    replayed, so the result is identical to recording ``fn`` directly.
    """
    if not _grad_enabled:
        return fn(*inputs)
    with no_grad():
        out = fn(*inputs)

    def backward(g):
        replay = [Tensor(t.data, requires_grad=t.requires_grad) for t in inputs]
        with enable_grad():
            y = fn(*replay)
        backprop(y, g)
        return tuple(r.grad for r in replay)

    return _result(out.data, inputs, backward, "checkpoint", force=True)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float32), requires_grad=True, name=name)
