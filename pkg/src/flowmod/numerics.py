"""Minimal dense-tensor reverse-mode autodiff core.

Everything runs on float64 numpy arrays. The op set is intentionally small:
exactly what a small conv detector with feature modulation needs (conv2d,
relu, softmax losses, elementwise arithmetic, shape plumbing). No GPU, no
broadcasting beyond what those ops require.
"""

from __future__ import annotations

import contextlib
import zlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent with an op's contract."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    return arr


class Tensor:
    """A float64 array plus an optional backward closure into its parents."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _backward: Callable | None = None,
                 _op: str = ""):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        self._op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op or 'leaf'})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Populate grads of every reachable tensor with requires_grad.

        Only defined for scalar tensors (a training loss).
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward() requires a scalar tensor, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # ----- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -_as_array(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward: Callable | None, op: str) -> Tensor:
    req = _grad_enabled and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req,
                  _parents=tuple(p for p in parents if p.requires_grad),
                  _backward=backward if req else None, _op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape`, inverting numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ----- elementwise arithmetic ----------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward, "mul")


# ----- shape plumbing -------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    x = _wrap(x)
    out_data = x.data.reshape(shape)

    def backward(g):
        x._accumulate(g.reshape(x.data.shape))

    return _make(out_data, (x,), backward, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    x = _wrap(x)
    axes = tuple(axes)
    out_data = x.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        x._accumulate(g.transpose(inv))

    return _make(out_data, (x,), backward, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(out_data, tensors, backward, "concat")


def index(x: Tensor, idx) -> Tensor:
    """Basic and integer-array indexing; backward scatter-adds."""
    x = _wrap(x)
    out_data = x.data[idx]

    def backward(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        x._accumulate(dx)

    return _make(out_data, (x,), backward, "index")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis (no fancy indexing, cheap backward)."""
    x = _wrap(x)
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out_data = x.data[sl]

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[sl] = g
        x._accumulate(dx)

    return _make(out_data, (x,), backward, "narrow")


# ----- reductions -----------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.data.shape))

    return _make(out_data, (x,), backward, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ----- nonlinearities and losses --------------------------------------------

def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient at 0 is 0."""
    x = _wrap(x)
    out_data = np.maximum(x.data, 0.0)
    mask = x.data > 0.0

    def backward(g):
        x._accumulate(g * mask)

    return _make(out_data, (x,), backward, "relu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis` (max-subtraction)."""
    x = _wrap(x)
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.data.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        x._accumulate(y * (g - inner))

    return _make(y, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _wrap(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out_data = z - lse
    sm = np.exp(out_data)

    def backward(g):
        x._accumulate(g - sm * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (x,), backward, "log_softmax")


def smooth_l1(x: Tensor) -> Tensor:
    """Elementwise Huber-style penalty: 0.5 x^2 if |x|<1 else |x|-0.5."""
    x = _wrap(x)
    a = np.abs(x.data)
    out_data = np.where(a < 1.0, 0.5 * x.data * x.data, a - 0.5)

    def backward(g):
        x._accumulate(g * np.where(a < 1.0, x.data, np.sign(x.data)))

    return _make(out_data, (x,), backward, "smooth_l1")


# ----- convolution ----------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[0], win.shape[1], win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation plus bias.

    Accepts a single image (C,H,W) or a batch (N,C,H,W); weight is
    (C_out,C_in,k,k), bias (C_out,). Output spatial size is
    floor((H + 2 pad - k)/stride) + 1.
    """
    x, weight, bias = _wrap(x), _wrap(weight), _wrap(bias)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d expects (C,H,W) or (N,C,H,W) input, got {x.data.shape}")
    if weight.data.ndim != 4 or weight.data.shape[2] != weight.data.shape[3]:
        raise ShapeError(f"conv2d weight must be (C_out,C_in,k,k), got {weight.data.shape}")
    n, c, h, w = xd.shape
    cout, cin, k, _ = weight.data.shape
    if c != cin:
        raise ShapeError(
            f"conv2d channel mismatch: input has {c} channels (shape {x.data.shape}) "
            f"but weight expects {cin} (shape {weight.data.shape})")
    if k < 1 or stride < 1 or pad < 0:
        raise ShapeError(f"conv2d needs k>=1, stride>=1, pad>=0 (got k={k}, stride={stride}, pad={pad})")
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ShapeError(f"conv2d kernel {k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    if bias.data.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {bias.data.shape}")

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols, ho, wo = _im2col(xp, k, stride)
    w2 = weight.data.reshape(cout, cin * k * k)
    out = cols @ w2.T + bias.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    if squeeze:
        out = out[0]

    def backward(g):
        gd = g[None] if squeeze else g
        g2 = np.ascontiguousarray(gd.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        if weight.requires_grad:
            weight._accumulate((g2.T @ cols).reshape(weight.data.shape))
        if bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ w2).reshape(n, ho, wo, cin, k, k)
            dxp = np.zeros_like(xp)
            for u in range(k):
                for v in range(k):
                    dxp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += \
                        dcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
            dx = dxp[:, :, pad:pad + h, pad:pad + w]
            x._accumulate(dx[0] if squeeze else dx)

    return _make(out, (x, weight, bias), backward, "conv2d")


# ----- parameters and optimization ------------------------------------------

@dataclass
class Parameter:
    """A named, optionally trainable tensor (weights of a network)."""

    tensor: Tensor
    name: str
    trainable: bool = True


def parameter_count(params: Iterable[Parameter], trainable_only: bool = True) -> int:
    return sum(p.tensor.size for p in params if p.trainable or not trainable_only)


def sgd_step(params: Iterable[Parameter], lr: float) -> None:
    """p <- p - lr * grad for each trainable parameter, then clear grads."""
    params = list(params)
    for p in params:
        if p.trainable and p.tensor.grad is None:
            raise ValueError(f"sgd_step: parameter '{p.name}' has no gradient")
    for p in params:
        if p.trainable:
            p.tensor.data -= lr * p.tensor.grad
        p.tensor.grad = None


def _name_seed(seed: int, name: str) -> np.random.Generator:
    # Name-keyed child seed: identical names draw identical weights no matter
    # what other parameters a network allocates. This is what makes the
    # modulated network start bitwise-equal to the plain RGB network.
    return np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))])


def he_uniform(shape: Sequence[int], fan_in: int, seed: int, name: str) -> np.ndarray:
    """He-uniform draw in [-sqrt(6/fan_in), +sqrt(6/fan_in)], seeded by (seed, name)."""
    bound = float(np.sqrt(6.0 / fan_in))
    rng = _name_seed(seed, name)
    return rng.uniform(-bound, bound, size=tuple(shape))
