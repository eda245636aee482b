"""Dense tensors with reverse-mode differentiation.

Only the operator set needed by the spiking network is provided. Every
differentiable op records its operands and a backward rule on the output
tensor; :meth:`Tensor.backward` linearises the graph into a :class:`Tape`
and replays it in reverse.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ParameterError(ValueError):
    """Raised for invalid scalar hyper-parameters."""


class DegenerateBatchError(ValueError):
    """Raised when batch statistics are undefined."""


_state = threading.local()


def default_dtype():
    return getattr(_state, "dtype", np.float32)


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype of newly created tensors (used by gradient checks)."""
    old = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = old


@contextlib.contextmanager
def no_grad():
    old = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self, grad=None) -> None:
        Tape.from_root(self).backward(self, grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Build an op output and attach its backward rule when any operand needs grad."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


class Tape:
    """Operations reachable from a root, in topological order (operands first)."""

    def __init__(self, records: list[Tensor]):
        self.records = records

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
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
        return cls(order)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, root: Tensor, grad=None) -> None:
        if not root.requires_grad:
            raise ValueError("backward() called on a tensor that does not require grad")
        if grad is None:
            if root.data.size != 1:
                raise ValueError("grad must be given for non-scalar roots")
            grad = np.ones_like(root.data)
        grads: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=root.data.dtype)}
        for node in reversed(self.records):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"incompatible broadcast shapes {a} and {b}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a.shape, b.shape)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = _wrap(a)
    c = float(c)

    def backward(g):
        return (g * c,)

    return _result(a.data * a.data.dtype.type(c), (a,), backward)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _result(out, (a,), backward)


def heaviside_surrogate(a, theta: float, width: float) -> Tensor:
    """Spike when ``a >= theta``; backward uses a rectangle of height 1/width.

    The pseudo-derivative is ``1/width`` strictly inside ``|a - theta| < width/2``
    and zero on and outside the boundary.
    """
    if not width > 0:
        raise ParameterError(f"surrogate width must be positive, got {width}")
    a = _wrap(a)
    shifted = a.data - a.data.dtype.type(theta)
    spikes = (shifted >= 0).astype(a.data.dtype)

    def backward(g):
        window = (np.abs(shifted) < width / 2).astype(g.dtype)
        return (g * window * g.dtype.type(1.0 / width),)

    return _result(spikes, (a,), backward)


# ---------------------------------------------------------------- reductions / structure


def mean(a, axis: int | tuple[int, ...], keepdims: bool = True) -> Tensor:
    a = _wrap(a)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % a.ndim for ax in axes)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).astype(g.dtype),)

    return _result(out, (a,), backward)


def sum_all(a) -> Tensor:
    a = _wrap(a)

    def backward(g):
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype),)

    return _result(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), backward)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _wrap(a)
    old = a.shape

    def backward(g):
        return (g.reshape(old),)

    return _result(a.data.reshape(shape), (a,), backward)


def transpose_last(a) -> Tensor:
    a = _wrap(a)

    def backward(g):
        return (np.swapaxes(g, -1, -2),)

    return _result(np.ascontiguousarray(np.swapaxes(a.data, -1, -2)), (a,), backward)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = [_wrap(p) for p in parts]
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise DimensionError(f"cannot concatenate {p.shape} with {ref} along channels")
    sizes = [p.shape[1] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=1))

    return _result(np.concatenate([p.data for p in parts], axis=1), parts, backward)


def split_channels(a, n: int) -> list[Tensor]:
    a = _wrap(a)
    c = a.shape[1]
    if c % n:
        raise DimensionError(f"channel axis of size {c} is not divisible into {n} parts")
    step = c // n
    out = []
    for i in range(n):
        lo, hi = i * step, (i + 1) * step

        def backward(g, lo=lo, hi=hi):
            full = np.zeros_like(a.data)
            full[:, lo:hi] = g
            return (full,)

        out.append(_result(a.data[:, lo:hi].copy(), (a,), backward))
    return out


def stack(parts: Sequence[Tensor]) -> Tensor:
    parts = [_wrap(p) for p in parts]

    def backward(g):
        return tuple(g[i] for i in range(len(parts)))

    return _result(np.stack([p.data for p in parts]), parts, backward)


# ---------------------------------------------------------------- layers


def conv1d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    x, weight = _wrap(x), _wrap(weight)
    if x.ndim != 3:
        raise DimensionError(f"input must be [batch, channels, length], got {x.shape}")
    if weight.ndim != 3:
        raise DimensionError(f"weight must be [out, in, kernel], got {weight.shape}")
    b, c_in, s = x.shape
    c_out, w_in, k = weight.shape
    if w_in != c_in:
        raise DimensionError(f"channel axis: input has {c_in} channels, weight expects {w_in}")
    if stride < 1 or padding < 0:
        raise ParameterError("stride must be >= 1 and padding >= 0")
    if k > s + 2 * padding:
        raise DimensionError(f"length axis: kernel {k} exceeds padded length {s + 2 * padding}")
    s_out = (s + 2 * padding - k) // stride + 1
    if bias is not None:
        bias = _wrap(bias)
        if bias.shape != (c_out,):
            raise DimensionError(f"bias must have shape ({c_out},), got {bias.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    cols = sliding_window_view(xp, k, axis=2)[:, :, : stride * (s_out - 1) + 1 : stride, :]
    out = np.tensordot(cols, weight.data, axes=([1, 3], [1, 2]))  # [b, s_out, c_out]
    out = np.ascontiguousarray(out.transpose(0, 2, 1))
    if bias is not None:
        out += bias.data[None, :, None]

    def backward(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2], [0, 2]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        if x.requires_grad:
            dcols = np.tensordot(g, weight.data, axes=([1], [0]))  # [b, s_out, c_in, k]
            gxp = np.zeros_like(xp)
            span = stride * (s_out - 1) + 1
            for j in range(k):
                gxp[:, :, j : j + span : stride] += dcols[:, :, :, j].transpose(0, 2, 1)
            gx = gxp[:, :, padding : padding + s] if padding else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


def avgpool1d(x, kernel: int, stride: int) -> Tensor:
    x = _wrap(x)
    b, c, s = x.shape
    if kernel > s:
        raise DimensionError(f"length axis: pooling kernel {kernel} exceeds length {s}")
    s_out = (s - kernel) // stride + 1
    span = stride * (s_out - 1) + 1
    windows = sliding_window_view(x.data, kernel, axis=2)[:, :, :span:stride, :]
    out = windows.mean(axis=-1)

    def backward(g):
        gx = np.zeros_like(x.data)
        share = g / kernel
        for j in range(kernel):
            gx[:, :, j : j + span : stride] += share
        return (gx,)

    return _result(out, (x,), backward)


def fully_connected(x, weight, bias=None) -> Tensor:
    x, weight = _wrap(x), _wrap(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"feature axis: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        bias = _wrap(bias)
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"bias must have shape ({weight.shape[0]},), got {bias.shape}")
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


class RunningStats:
    """Per-channel running mean/variance buffers of a batch-norm layer."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels, dtype=default_dtype())
        self.var = np.ones(channels, dtype=default_dtype())


def batchnorm1d(
    x,
    gamma,
    beta,
    running: RunningStats | None,
    training: bool = True,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    if x.ndim != 3:
        raise DimensionError(f"input must be [batch, channels, length], got {x.shape}")
    b, c, s = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"channel axis: affine params must have shape ({c},)")
    dt = x.data.dtype
    if training:
        n = b * s
        if n < 2:
            raise DegenerateBatchError("batch norm in train mode needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        if running is not None:
            running.mean[...] = (1 - momentum) * running.mean + momentum * mu
            running.var[...] = (1 - momentum) * running.var + momentum * var * n / (n - 1)
    else:
        if running is None:
            raise ValueError("eval-mode batch norm requires running statistics")
        mu, var = running.mean.astype(dt), running.var.astype(dt)
    inv = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = (x.data - mu[None, :, None]) * inv[None, :, None]
    out = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None]
            if training:
                n = b * s
                gx = (
                    inv[None, :, None]
                    / n
                    * (
                        n * gxhat
                        - gxhat.sum(axis=(0, 2), keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=(0, 2), keepdims=True)
                    )
                )
            else:
                gx = gxhat * inv[None, :, None]
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), backward)


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.isfinite(t.data).all() for t in tensors)
