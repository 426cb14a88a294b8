"""Dense tensors with tape-based reverse-mode differentiation.

Every op returns a new :class:`Tensor`; nothing is modified in place.  When
gradient recording is on and any input requires a gradient, the op appends a
node to the active :class:`Tape`.  ``backward(loss)`` replays that tape once,
in reverse order, and then retires it.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> backward(sum(x * x))
    >>> x.grad
    array([6.])
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "DimensionError", "ContractError", "TapeStateError",
    "tensor", "parameter", "no_grad", "is_grad_enabled", "tape_stats", "backward",
    "add", "sub", "mul", "div", "neg", "matmul", "transpose", "swapaxes",
    "reshape", "concat", "sum", "mean", "exp", "log", "tanh", "sigmoid",
    "gelu", "softmax", "log_softmax", "layer_norm", "l2_norm", "square",
]


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class TapeStateError(RuntimeError):
    pass


_GRAD_ENABLED = True
_ACTIVE_TAPE: "Tape | None" = None
_STATS = {"tapes": 0, "nodes": 0}


class Tape:
    """Append-only record of executed ops."""

    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False
        _STATS["tapes"] += 1

    def record(self, out: "Tensor", parents: tuple["Tensor", ...], fn: Callable) -> None:
        if self.consumed:
            raise TapeStateError("cannot record onto a tape that was already replayed")
        out._tape = self
        out._node = len(self.nodes)
        self.nodes.append((out, parents, fn))
        _STATS["nodes"] += 1

    def __len__(self) -> int:
        return len(self.nodes)


def _active_tape() -> Tape:
    global _ACTIVE_TAPE
    if _ACTIVE_TAPE is None or _ACTIVE_TAPE.consumed:
        _ACTIVE_TAPE = Tape()
    return _ACTIVE_TAPE


def tape_stats() -> dict[str, int]:
    """Cumulative count of tapes opened and nodes recorded in this process."""
    return dict(_STATS)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Inference mode: ops inside never touch a tape."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "_node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != np.float32:
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._node: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operators
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return _getitem(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # python scalars adopt the tensor operand's dtype so float32 paths stay float32
    if isinstance(a, Tensor):
        return a, _wrap(b, a)
    if isinstance(b, Tensor):
        return _wrap(a, b), b
    return _wrap(a), _wrap(b)


def _make(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    out = Tensor(data)
    if not _GRAD_ENABLED or not any(p.requires_grad for p in parents):
        return out
    tape = _active_tape()
    for p in parents:
        if p._node is not None and p._tape is not tape:
            raise TapeStateError("input tensor belongs to a tape that was already replayed")
    out.requires_grad = True
    tape.record(out, tuple(parents), fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Leaf gradients accumulate across calls (clear them with ``zero_grad``).
    The tape is retired afterwards; replaying it again raises TapeStateError.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    if loss.is_leaf:
        _accumulate(loss, np.ones_like(loss.data))
        return
    tape = loss._tape
    if tape.consumed:
        raise TapeStateError("backward was already called on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, parents, fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for p, pg in zip(parents, fn(g)):
            if pg is None or not p.requires_grad:
                continue
            if p.is_leaf:
                _accumulate(p, pg)
            elif id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    tape.consumed = True
    tape.nodes.clear()


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
    leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


# elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = _wrap(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = _wrap(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _wrap(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = _wrap(a)
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), fn)


# linear algebra and shape ops

def _matmul_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # a lone row would take the gemv kernel, whose rounding differs from gemm;
    # doubling it keeps every row bit-identical to its value inside a larger batch
    if a.ndim == 2 and a.shape[0] == 1 and b.ndim == 2:
        return np.matmul(np.concatenate([a, a]), b)[:1]
    return np.matmul(a, b)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = _matmul_rows(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def fn(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), fn)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _wrap(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(np.transpose(a.data, axes)), (a,),
                 lambda g: (np.transpose(g, inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = _wrap(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _wrap(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def _getitem(a: Tensor, idx) -> Tensor:
    out = np.array(a.data[idx], copy=True)
    basic = _is_basic_index(idx)

    def fn(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += np.reshape(g, out.shape)
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), fn)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    if not ts:
        raise ContractError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shape mismatch: {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _wrap(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return _make(out, (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims).copy(),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    n = a.data.size / max(out.size, 1)
    return _make(out, (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / n,))


# normalizations

def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), fn)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _make(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain * xhat + bias``."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}, {bias.shape} do not match last axis {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def fn(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gain, bias), fn)


def l2_norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at zero is taken as 0."""
    a = _wrap(a)
    nrm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    out = nrm if keepdims else np.squeeze(nrm, axis=axis)
    safe = np.where(nrm > 0, nrm, 1.0)

    def fn(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * a.data / safe * (nrm > 0),)

    return _make(np.ascontiguousarray(out), (a,), fn)
