"""Reverse-mode autodiff over ``[..., channels, time]`` arrays.

Only the operations the denoiser needs are provided. A leading batch axis is
allowed everywhere; convolutions act on the last two axes.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numba
import numpy as np

PADDINGS = ("valid", "same_symmetric", "same_causal")

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = previous


class GraphError(RuntimeError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Array node in a dynamically recorded computation graph."""

    def __init__(self, data, requires_grad: bool = False):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        self.data = data
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._consumed = False

    # -- bookkeeping --------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, grad: np.ndarray) -> None:
        grad = _unbroadcast(grad, self.data.shape)
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype)
        else:
            self.grad = self.grad + grad

    @staticmethod
    def _make(data, parents, backward) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- elementwise --------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g)
            if other.requires_grad:
                other._accumulate(g)

        return Tensor._make(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g)
            if other.requires_grad:
                other._accumulate(-g)

        return Tensor._make(self.data - other.data, (self, other), backward)

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: self._accumulate(-g))

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * other.data)
            if other.requires_grad:
                other._accumulate(g * self.data)

        return Tensor._make(self.data * other.data, (self, other), backward)

    __rmul__ = __mul__

    def tanh(self) -> "Tensor":
        y = np.tanh(self.data)
        return Tensor._make(y, (self,), lambda g: self._accumulate(g * (1.0 - y * y)))

    def sigmoid(self) -> "Tensor":
        # tanh form avoids exp overflow for large negative inputs
        y = 0.5 * (np.tanh(0.5 * self.data) + 1.0)
        return Tensor._make(y, (self,), lambda g: self._accumulate(g * y * (1.0 - y)))

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor._make(np.where(mask, self.data, 0.0), (self,),
                            lambda g: self._accumulate(g * mask))

    def abs(self) -> "Tensor":
        # subgradient 0 at 0
        sign = np.sign(self.data)
        return Tensor._make(np.abs(self.data), (self,), lambda g: self._accumulate(g * sign))

    # -- reductions / slicing -----------------------------------------------

    def sum(self) -> "Tensor":
        shape = self.data.shape
        return Tensor._make(np.sum(self.data), (self,),
                            lambda g: self._accumulate(np.broadcast_to(g, shape)))

    def mean(self) -> "Tensor":
        shape, n = self.data.shape, self.data.size
        return Tensor._make(np.sum(self.data) / n, (self,),
                            lambda g: self._accumulate(np.broadcast_to(g / n, shape)))

    def crop(self, start: int, stop: int) -> "Tensor":
        """Slice ``[start, stop)`` along the time (last) axis."""
        length = self.data.shape[-1]
        if not 0 <= start <= stop <= length:
            raise ValueError(f"crop [{start}, {stop}) outside length {length}")

        def backward(g):
            full = np.zeros(self.data.shape, dtype=g.dtype)
            full[..., start:stop] = g
            self._accumulate(full)

        return Tensor._make(self.data[..., start:stop], (self,), backward)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tanh(x: Tensor) -> Tensor:
    return as_tensor(x).tanh()


def sigmoid(x: Tensor) -> Tensor:
    return as_tensor(x).sigmoid()


def relu(x: Tensor) -> Tensor:
    return as_tensor(x).relu()


def backward(loss: Tensor) -> None:
    """Fill ``.grad`` of every tensor that requires it with d(loss)/d(tensor).

    Leaf gradients accumulate across calls until zeroed. The graph is released
    afterwards; calling again on the same loss raises :class:`GraphError`.
    """
    if loss.data.size != 1:
        raise GraphError(f"loss must be a scalar, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("graph already consumed")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor requiring grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node.grad = None
            node._consumed = True


# -- convolution ------------------------------------------------------------

@numba.njit(cache=True)
def _conv_forward(x, w, b, dilation, out_len):
    # fixed accumulation order: bias, then ascending input channel, then tap
    batch, _, _ = x.shape
    out_ch, in_ch, taps = w.shape
    out = np.empty((batch, out_ch, out_len), dtype=x.dtype)
    for n in range(batch):
        for o in range(out_ch):
            bo = b[o]
            for t in range(out_len):
                out[n, o, t] = bo
            for i in range(in_ch):
                for k in range(taps):
                    wv = w[o, i, k]
                    off = k * dilation
                    for t in range(out_len):
                        out[n, o, t] += wv * x[n, i, t + off]
    return out


@dataclass
class ConvParams:
    """Weights ``[out, in, taps]`` and bias ``[out]`` of one convolution."""

    weight: Tensor
    bias: Tensor

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_len(self) -> int:
        return self.weight.shape[2]

    @classmethod
    def init(cls, out_channels: int, in_channels: int, kernel_len: int,
             rng: np.random.Generator, dtype=np.float64) -> "ConvParams":
        """Uniform fan-in init in ``±sqrt(1 / (in_channels * kernel_len))``."""
        bound = np.sqrt(1.0 / (in_channels * kernel_len))
        w = rng.uniform(-bound, bound, size=(out_channels, in_channels, kernel_len))
        b = rng.uniform(-bound, bound, size=(out_channels,))
        return cls(Tensor(w.astype(dtype), requires_grad=True),
                   Tensor(b.astype(dtype), requires_grad=True))


def padding_amounts(kernel_len: int, dilation: int, padding: str) -> tuple[int, int]:
    """Zeros added (left, right) by a padding mode."""
    span = (kernel_len - 1) * dilation
    if padding == "valid":
        return 0, 0
    if padding == "same_symmetric":
        if span % 2:
            raise ValueError("same_symmetric padding needs an odd kernel length")
        return span // 2, span // 2
    if padding == "same_causal":
        return span, 0
    raise ValueError(f"unknown padding {padding!r}; expected one of {PADDINGS}")


def conv1d(x: Tensor, params: ConvParams, dilation: int = 1, padding: str = "valid") -> Tensor:
    """Dilated 1-D convolution (cross-correlation) over the last axis.

    ``out[o, t] = bias[o] + sum_{i,k} w[o, i, k] * x_padded[i, t + k * dilation]``
    """
    x = as_tensor(x)
    w, b = params.weight, params.bias
    if dilation < 1:
        raise ValueError("dilation must be a positive integer")
    if x.data.ndim < 2 or x.shape[-2] != params.in_channels:
        raise ValueError(f"input shape {x.shape} does not match {params.in_channels} input channels")
    taps = params.kernel_len
    left, right = padding_amounts(taps, dilation, padding)
    lead = x.shape[:-2]
    xs = x.data.reshape((-1,) + x.shape[-2:])
    if left or right:
        xs = np.pad(xs, ((0, 0), (0, 0), (left, right)))
    span = (taps - 1) * dilation
    out_len = xs.shape[-1] - span
    if out_len < 1:
        raise ValueError(f"input length {x.shape[-1]} too short for span {span + 1} ({padding})")
    xs = np.ascontiguousarray(xs)
    wd = np.ascontiguousarray(w.data, dtype=xs.dtype)
    bd = np.ascontiguousarray(b.data, dtype=xs.dtype)
    out = _conv_forward(xs, wd, bd, dilation, out_len)

    def backward(g):
        g = g.reshape((-1,) + g.shape[-2:])
        if b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2)))
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for k in range(taps):
                seg = xs[:, :, k * dilation:k * dilation + out_len]
                gw[:, :, k] = np.tensordot(g, seg, axes=((0, 2), (0, 2)))
            w._accumulate(gw)
        if x.requires_grad:
            gx = np.zeros(xs.shape, dtype=g.dtype)
            for k in range(taps):
                gx[:, :, k * dilation:k * dilation + out_len] += np.matmul(w.data[:, :, k].T, g)
            gx = gx[:, :, left:gx.shape[-1] - right]
            x._accumulate(gx.reshape(x.shape))

    return Tensor._make(out.reshape(lead + out.shape[1:]), (x, w, b), backward)


def project(matrix: Tensor, bits) -> Tensor:
    """Map condition bit vectors ``[..., nbits]`` to channel biases ``[..., C, 1]``."""
    matrix = as_tensor(matrix)
    bits = np.asarray(bits, dtype=matrix.dtype)
    if bits.shape[-1] != matrix.shape[1]:
        raise ValueError(f"expected {matrix.shape[1]} condition bits, got {bits.shape[-1]}")
    out = np.matmul(bits, matrix.data.T)[..., None]

    def backward(g):
        g2 = g[..., 0].reshape(-1, matrix.shape[0])
        matrix._accumulate(g2.T @ bits.reshape(-1, matrix.shape[1]))

    return Tensor._make(out, (matrix,), backward)


def gated_unit(x: Tensor, filter: ConvParams, gate: ConvParams, dilation: int = 1,
               padding: str = "valid", cond_bias_f=None, cond_bias_g=None) -> Tensor:
    """``tanh(conv(x, filter) + cond_f) * sigmoid(conv(x, gate) + cond_g)``."""
    if filter.weight.shape != gate.weight.shape:
        raise ValueError("filter and gate convolutions must have the same shape")
    f = conv1d(x, filter, dilation, padding)
    g = conv1d(x, gate, dilation, padding)
    if cond_bias_f is not None:
        f = f + _as_bias(cond_bias_f, filter.out_channels)
    if cond_bias_g is not None:
        g = g + _as_bias(cond_bias_g, gate.out_channels)
    return f.tanh() * g.sigmoid()


def _as_bias(bias, channels: int) -> Tensor:
    if isinstance(bias, Tensor):
        if bias.shape[-2:] != (channels, 1):
            raise ValueError(f"condition bias shape {bias.shape} does not match {channels} channels")
        return bias
    bias = np.asarray(bias, dtype=np.float64)
    if bias.shape[-1] != channels:
        raise ValueError(f"condition bias length {bias.shape[-1]} does not match {channels} channels")
    return Tensor(bias[..., None])


# -- optimizer --------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict, **hyper) -> "AdamState":
        state = cls(**hyper)
        for name, p in params.items():
            data = p.data if isinstance(p, Tensor) else np.asarray(p)
            state.m[name] = np.zeros_like(data)
            state.v[name] = np.zeros_like(data)
        return state


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One bias-corrected Adam update, in place on the arrays in ``params``."""
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        data = p.data if isinstance(p, Tensor) else p
        g = grads[name]
        m, v = state.m[name], state.v[name]
        if g.shape != data.shape or m.shape != data.shape:
            raise ValueError(f"shape mismatch for parameter {name!r}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
