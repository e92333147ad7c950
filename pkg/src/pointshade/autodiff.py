"""Minimal numpy-backed tensor engine with reverse-mode differentiation.

Only the operations the render network needs are provided: 2D convolution,
nearest-neighbor upsampling, dense layers, per-channel spatial statistics,
a handful of pointwise functions and reductions, concat/slice/reshape.
Image tensors are laid out (N, C, H, W).

Gradients are recorded on an explicit :class:`GradTape`. Ops executed while
a tape is active append one node each; ``tape.backward(loss)`` walks the
tape once in reverse and accumulates gradients into every
:class:`Parameter` that participated. Without an active tape the same ops
run as plain numpy with no recording overhead, which is the inference path.

float32 is the working precision; float64 is supported so finite-difference
gradient checks can run at full accuracy.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_state = threading.local()


def _active_tape() -> "GradTape | None":
    return getattr(_state, "tape", None)


class Tensor:
    """Immutable n-dimensional array of float32 or float64 values."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr

    @property
    def shape(self):
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

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # arithmetic delegates to the op functions below so recording is uniform
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)


class Parameter(Tensor):
    """Learnable tensor with a gradient buffer and a stable identity.

    The identity keys the weights file; the gradient is reset to zero
    between optimizer steps via :meth:`zero_grad`.
    """

    __slots__ = ("grad", "name")

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def assign(self, values: np.ndarray) -> None:
        """Replace the value in place (optimizer updates, weight loading)."""
        arr = np.asarray(values, dtype=self.data.dtype)
        if arr.shape != self.data.shape:
            raise ValueError(
                f"parameter {self.name!r}: expected shape {self.data.shape}, got {arr.shape}"
            )
        self.data = arr

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape})"


class _Node:
    __slots__ = ("out", "parents", "vjp")

    def __init__(self, out: Tensor, parents: tuple, vjp: Callable):
        self.out = out
        self.parents = parents
        self.vjp = vjp


class GradTape:
    """Records one forward pass; context manager activates recording.

    Nodes are appended in execution order, so reverse iteration is a valid
    topological order: each node's output has already received every
    downstream contribution by the time its vjp runs, and each recorded
    node is visited exactly once. Gradients accumulate additively when a
    tensor fans out into several consumers.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._params: dict[int, Parameter] = {}
        self._used = False

    def __enter__(self) -> "GradTape":
        if _active_tape() is not None:
            raise RuntimeError("a GradTape is already active in this thread")
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = None
        return False

    def _record(self, out: Tensor, parents: Sequence[Tensor], vjp: Callable) -> None:
        for p in parents:
            if isinstance(p, Parameter):
                self._params[id(p)] = p
        self._nodes.append(_Node(out, tuple(parents), vjp))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(param) into every Parameter on the tape."""
        if loss.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        if self._used:
            raise RuntimeError("tape already backpropagated; record a new forward pass")
        self._used = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for key, param in self._params.items():
            g = grads.get(key)
            if g is not None:
                param.grad += g.astype(param.grad.dtype, copy=False)


def backward(tape: GradTape, loss: Tensor) -> None:
    """Functional alias for :meth:`GradTape.backward`."""
    tape.backward(loss)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, (g, s) in enumerate(zip(grad.shape, shape)):
        if s == 1 and g != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _make(out_data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = _active_tape()
    if tape is not None:
        tape._record(out, parents, vjp)
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting, gradients unbroadcast)

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    out = a.data * b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    out = a.data / b.data
    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb
    return _make(out, (a, b), vjp)


# ---------------------------------------------------------------------------
# pointwise functions

def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    # subgradient guard at 0 keeps the magnitude loss finite on exact zeros
    def vjp(g):
        denom = np.maximum(2.0 * out, np.finfo(out.dtype).tiny)
        return (g / denom,)
    return _make(out, (x,), vjp)


def square(x: Tensor) -> Tensor:
    out = x.data * x.data
    return _make(out, (x,), lambda g: (g * 2.0 * x.data,))


def absolute(x: Tensor) -> Tensor:
    out = np.abs(x.data)
    return _make(out, (x,), lambda g: (g * np.sign(x.data),))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    out = x.data * factor
    return _make(out, (x,), lambda g: (g * factor,))


def sigmoid(x: Tensor) -> Tensor:
    # evaluated in the positive half for stability
    d = x.data
    out = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                   np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d)))).astype(d.dtype)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------------------
# reductions and shape ops

def _expand_reduced(g: np.ndarray, shape: tuple, axes, keepdims: bool) -> np.ndarray:
    if axes is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes_t = (axes,) if isinstance(axes, int) else axes
    out = x.data.sum(axis=axes_t, keepdims=keepdims)
    return _make(
        np.asarray(out, dtype=x.dtype),
        (x,),
        lambda g: (_expand_reduced(g, x.shape, axes_t, keepdims).astype(x.dtype),),
    )


def tmean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes_t = (axes,) if isinstance(axes, int) else axes
    if axes_t is None:
        count = x.size
    else:
        count = int(np.prod([x.shape[a] for a in axes_t]))
    out = x.data.mean(axis=axes_t, keepdims=keepdims)
    return _make(
        np.asarray(out, dtype=x.dtype),
        (x,),
        lambda g: (_expand_reduced(g, x.shape, axes_t, keepdims).astype(x.dtype) / count,),
    )


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Iterable[Tensor], axis: int = 1) -> Tensor:
    ts = list(tensors)
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    def vjp(g):
        pieces = []
        start = 0
        for s in sizes:
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, start + s)
            pieces.append(g[tuple(idx)])
            start += s
        return tuple(pieces)
    return _make(out, tuple(ts), vjp)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = x.data[idx]
    def vjp(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)
    return _make(out, (x,), vjp)


# ---------------------------------------------------------------------------
# network building blocks

def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Rows of ``x`` through the affine map ``x @ weight.T + bias``."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ValueError(f"linear expects 2-D input/weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"linear dimension mismatch: input width {x.shape[1]} vs weight width {weight.shape[1]}"
        )
    out = x.data @ weight.data.T + bias.data
    def vjp(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)
    return _make(out, (x, weight, bias), vjp)


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, k, k, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    return view.reshape(n, c * k * k, ho * wo)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation over (N, C, H, W) input.

    Output spatial size is (H + 2*padding - k)//stride + 1. Implemented as
    im2col + matmul so the heavy lifting stays in BLAS.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-D tensors, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, ck, kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d kernel must be square with odd extent, got {kh}x{kw}")
    if ck != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, kernel expects {ck}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d requires stride >= 1 and padding >= 0")
    k = kh
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output would be empty for input {h}x{w}, kernel {k}, padding {padding}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, k, stride, ho, wo)            # (N, C*k*k, Ho*Wo)
    wmat = kernel.data.reshape(o, c * k * k)
    out = np.matmul(wmat, cols) + bias.data[:, None]  # (N, O, Ho*Wo)
    out = out.reshape(n, o, ho, wo)

    def vjp(g):
        gmat = g.reshape(n, o, ho * wo)
        gb = gmat.sum(axis=(0, 2))
        gw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        gcols = np.matmul(wmat.T, gmat)               # (N, C*k*k, Ho*Wo)
        gcols = gcols.reshape(n, c, k, k, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + stride * (ho - 1) + 1 : stride,
                    j : j + stride * (wo - 1) + 1 : stride] += gcols[:, :, i, j]
        if padding:
            gx = gxp[:, :, padding : padding + h, padding : padding + w]
        else:
            gx = gxp
        return gx, gw, gb

    return _make(out, (x, kernel, bias), vjp)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling: each value fills a 2x2 block."""
    if x.ndim != 4:
        raise ValueError(f"upsample2x expects a 4-D tensor, got {x.shape}")
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    n, c, h, w = x.shape
    def vjp(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)
    return _make(out, (x,), vjp)


def channel_stats(x: Tensor) -> tuple[Tensor, Tensor]:
    """Per-sample, per-channel spatial mean and population std of (N,C,H,W).

    Returned shapes are (N, C). Differentiable; built from the reduction
    primitives so the tape handles the gradient.
    """
    if x.ndim != 4:
        raise ValueError(f"channel_stats expects a 4-D tensor, got {x.shape}")
    mu = tmean(x, axes=(2, 3), keepdims=True)
    var = tmean(square(sub(x, mu)), axes=(2, 3), keepdims=True)
    std = sqrt(var)
    n, c = x.shape[:2]
    return reshape(mu, (n, c)), reshape(std, (n, c))
