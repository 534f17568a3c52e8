"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record onto the active :class:`Tape` only when at least one input
requires a gradient. Nothing is recorded outside a ``with Tape():`` block or
inside ``with inference_mode():``, so a frozen prefix can run without growing
the tape.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w @ Tensor([[3.0], [4.0]])).sum()
    >>> tape.backward(loss)
    >>> w.grad
    array([[3., 4.]])
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, NumericError

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
L2_EPS = 1e-12


class _State(threading.local):
    def __init__(self):
        self.tapes: list[Tape] = []
        self.inference = 0
        self.scope: Optional[str] = None


_state = _State()


class Tensor:
    """n-dimensional array of float64 with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name", "inference", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        if self.data.ndim == 0:
            self.data = self.data.reshape(())
        self.inference = _state.inference > 0
        self.requires_grad = bool(requires_grad) and not self.inference
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.inference = _state.inference > 0
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        rg = " requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag}{rg})"

    def __len__(self):
        return self.shape[0]

    # arithmetic sugar
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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return permute(self, axes if axes else None)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], tuple]
    scope: Optional[str] = None


@dataclass
class Tape:
    """Write-once log of the operations of one forward pass."""

    nodes: list = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc):
        popped = _state.tapes.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.nodes)

    def nodes_in_scope(self, prefix: str) -> list:
        return [n for n in self.nodes if n.scope is not None and n.scope.startswith(prefix)]

    def scope_counts(self) -> dict:
        counts: dict = {}
        for n in self.nodes:
            counts[n.scope] = counts.get(n.scope, 0) + 1
        return counts

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def current_tape() -> Optional[Tape]:
    return _state.tapes[-1] if _state.tapes else None


@contextlib.contextmanager
def inference_mode():
    """Record nothing; tensors created inside never acquire a gradient."""
    _state.inference += 1
    try:
        yield
    finally:
        _state.inference -= 1


def is_inference() -> bool:
    return _state.inference > 0


@contextlib.contextmanager
def scope(label: str):
    """Tag every node recorded inside with ``label`` (e.g. ``"block3"``)."""
    prev = _state.scope
    _state.scope = label
    try:
        yield
    finally:
        _state.scope = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, bwd) -> Tensor:
    tape = _state.tapes[-1] if _state.tapes else None
    record = (
        tape is not None
        and _state.inference == 0
        and any(t.requires_grad for t in inputs)
    )
    result = Tensor._wrap(out, record)
    if record:
        tape.nodes.append(Node(op, tuple(inputs), result, bwd, _state.scope))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every tensor reachable from ``loss``."""
    if loss.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise ContractError("tape already consumed by a previous backward()")
    if not loss.requires_grad:
        raise ContractError("loss was not produced under recording")
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        grads = node.backward(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad or inp.inference:
                continue
            # grads are never mutated in place, so sharing arrays is safe
            if inp.grad is None:
                inp.grad = np.asarray(gi, dtype=np.float64)
            else:
                inp.grad = inp.grad + gi


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(
        "add",
        (a, b),
        a.data + b.data,
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(
        "sub",
        (a, b),
        a.data - b.data,
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", (a, b), ad * bd, bwd)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _emit("exp", (x,), y, lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("log", (x,), np.log(xd), lambda g: (g / xd,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf form of the normal CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))

    def bwd(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _emit("gelu", (x,), xd * cdf, bwd)


# ---------------------------------------------------------------- reductions


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _emit("sum", (x,), np.asarray(out), bwd)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- shape


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def permute(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(
        "permute", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inv),)
    )


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def broadcast_to(x: Tensor, shape) -> Tensor:
    old = x.shape
    out = np.broadcast_to(x.data, shape)
    return _emit("broadcast", (x,), out, lambda g: (_unbroadcast(g, old),))


def take(x: Tensor, start: int, stop: int, axis: int = -2) -> Tensor:
    """Contiguous slice ``[start, stop)`` along ``axis``."""
    ax = axis % x.ndim
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    shape = x.shape

    def bwd(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _emit("take", (x,), x.data[idx], bwd)


def concat(parts: Sequence[Tensor], axis: int = -2) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("concat needs at least one part")
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if p.ndim != len(ref) or any(
            p.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise DimensionError(
                f"concat: shapes {ref} and {p.shape} differ outside axis {axis}"
            )
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def bwd(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
            for i in range(len(parts))
        )

    return _emit("concat", parts, np.concatenate([p.data for p in parts], axis=ax), bwd)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack ``[*, D]`` token blocks vertically, in the given order."""
    return concat(parts, axis=-2)


def split_rows(x: Tensor, sizes: Sequence[int]) -> list:
    out, start = [], 0
    for s in sizes:
        out.append(take(x, start, start + s, axis=-2))
        start += s
    if start != x.shape[-2]:
        raise DimensionError(f"split sizes {list(sizes)} do not cover {x.shape[-2]} rows")
    return out


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # (..., k) @ (k, n): one flat GEMM instead of a batched one
        k, n = bd.shape
        a2 = ad.reshape(-1, k)
        out = (a2 @ bd).reshape(ad.shape[:-1] + (n,))

        def bwd(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _emit("matmul", (a, b), out, bwd)

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _emit("matmul", (a, b), ad @ bd, bwd)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- normalizers


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max subtraction."""
    xd = x.data
    if np.isnan(xd).any():
        raise NumericError("softmax input contains NaN")
    z = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (x,), y, bwd)


def softmax_rows(x: Tensor) -> Tensor:
    return softmax(x, axis=-1)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise DimensionError(
            f"layer_norm: token width {D} vs gamma {gamma.shape} / beta {beta.shape}"
        )
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def bwd(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layer_norm", (x, gamma, beta), xhat * gd + beta.data, bwd)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Unit Euclidean norm along ``axis``; rows with norm <= 1e-12 pass through unchanged."""
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    tiny = n <= L2_EPS
    safe = np.where(tiny, 1.0, n)
    y = np.where(tiny, xd, xd / safe)

    def bwd(g):
        proj = y * (g * y).sum(axis=axis, keepdims=True)
        return (np.where(tiny, g, (g - proj) / safe),)

    return _emit("l2_normalize", (x,), y, bwd)


# ---------------------------------------------------------------- helpers


def parameters_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return float(np.sqrt(total))
