"""Dense float64 tensors with a reverse-mode autodiff tape.

Every op records its parents and a local backward rule. Nodes carry a
monotonically increasing sequence number; ``backward`` replays the recorded
nodes in reverse sequence order, which is a valid reverse topological order
because a node can only consume tensors created before it.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_seq = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, finite differences)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_seq)

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data if data.dtype == np.float64 else data.astype(np.float64)
        out.grad = None
        out.name = None
        out._seq = next(_seq)
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @staticmethod
    def zeros(*shape, requires_grad=False) -> "Tensor":
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    @staticmethod
    def ones(*shape, requires_grad=False) -> "Tensor":
        return Tensor(np.ones(shape), requires_grad=requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- backward ---------------------------------------------------------------

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in nodes:
                continue
            nodes[id(node)] = node
            stack.extend(p for p in node._parents if p.requires_grad)
        order = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operator sugar -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._from_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._from_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._from_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), backward)


def power(a: Tensor, p: float) -> Tensor:
    return Tensor._from_op(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = a.data > 0
    return Tensor._from_op(a.data * mask, (a,), lambda g: (g * mask,))


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return Tensor._from_op(
        np.where(cond, a.data, b.data), (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                   _unbroadcast(np.where(cond, 0.0, g), b.shape)),
    )


# -- reductions and shape ops -------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._from_op(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._from_op(np.array(a.data[idx]), (a,), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    return Tensor._from_op(
        out, tensors,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))),
    )


# -- linear algebra ------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        # stacked rows times one weight matrix: a single GEMM each way
        k, n = b.shape
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))

        def backward_2d(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return Tensor._from_op(out, (a, b), backward_2d)

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    y = matmul(x, weight)
    return y + bias if bias is not None else y


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(s, (x,), backward)


def softmax_lastdim(x: Tensor) -> Tensor:
    return softmax(x, axis=-1)


def mse(a: Tensor, b) -> Tensor:
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return mean(d * d)


# -- convolution ----------------------------------------------------------------------


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of ``x`` (B, C_in, H, W) with ``kernel`` (C_out, C_in, kh, kw)."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    _, _, h, w = x.shape
    c_out, _, kh, kw = kernel.shape
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ShapeError(
            f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    ho, wo = win.shape[2], win.shape[3]
    out = np.tensordot(win, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, c_out, 1, 1)

    def backward(g):
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(g, kernel.data[:, :, i, j], axes=([1], [0]))
                    gxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += contrib.transpose(0, 3, 1, 2)
            gx = gxp[:, :, ph:ph + h, pw:pw + w]
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._from_op(np.ascontiguousarray(out), parents, backward)


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """1-D cross-correlation of ``x`` (B, C_in, L) with ``kernel`` (C_out, C_in, k)."""
    if x.ndim != 3 or kernel.ndim != 3:
        raise ShapeError(f"conv1d expects 3-D input and kernel, got {x.shape} and {kernel.shape}")
    b, c, n = x.shape
    co, ci, k = kernel.shape
    y = conv2d(reshape(x, (b, c, 1, n)), reshape(kernel, (co, ci, 1, k)), bias,
               stride=(1, stride), padding=(0, padding))
    return reshape(y, (b, co, y.shape[-1]))


# -- verification harness -------------------------------------------------------------


def gradient_check(f: Callable[..., Tensor], x: Tensor | Iterable[Tensor], eps: float = 1e-3) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` receives the tensor(s) in ``x`` and must return a scalar tensor.
    NaN anywhere counts as a failure and yields ``inf``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    out = f(*xs)
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]

    worst = 0.0
    with no_grad():
        for t, a in zip(xs, analytic):
            flat = t.data.reshape(-1)
            af = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(*xs).item()
                flat[i] = orig - eps
                fm = f(*xs).item()
                flat[i] = orig
                cd = (fp - fm) / (2 * eps)
                if not (np.isfinite(cd) and np.isfinite(af[i])):
                    return float("inf")
                err = abs(af[i] - cd) / max(abs(af[i]), abs(cd), 1e-8)
                worst = max(worst, err)
    return worst
