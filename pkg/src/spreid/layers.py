"""Layers with hand-written forward and backward passes.

Every layer is callable as ``layer(x, tape=None)``. When a :class:`Tape` is
given, the layer records a closure that maps the upstream gradient to the
input gradient and accumulates parameter gradients into ``Param.grad``.
Calling ``tape.backward(grad)`` replays those closures in reverse order.

The functional kernels (``conv2d_forward``/``conv2d_backward`` and friends)
are exposed separately so they can be checked in isolation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import DimensionError, DomainError

__all__ = [
    "Param",
    "Tape",
    "conv_output_size",
    "conv2d_forward",
    "conv2d_backward",
    "Conv2d",
    "max_pool2d_forward",
    "max_pool2d_backward",
    "MaxPool2d",
    "relu",
    "ReLU",
    "global_avg_pool",
    "GlobalAvgPool",
    "Linear",
    "softmax_cross_entropy",
    "pixel_softmax_cross_entropy",
    "fan_in_uniform",
]


class Param:
    """A named trainable array with a gradient accumulator of the same shape."""

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.value.shape})"


@dataclass
class Tape:
    """Ordered record of executed ops; backward runs them in reverse."""

    entries: list[tuple[str, Callable[[np.ndarray], np.ndarray]]] = field(default_factory=list)

    def record(self, name: str, backward: Callable[[np.ndarray], np.ndarray]) -> None:
        self.entries.append((name, backward))

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for _, fn in reversed(self.entries):
            grad = fn(grad)
        return grad

    def names(self) -> list[str]:
        return [name for name, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# -- convolution ----------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _windows(xp, kh, kw, stride, dilation, ho, wo):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * dilation, j * dilation
            cols[:, :, i, j] = xp[:, :, r0:r0 + span_h:stride, c0:c0 + span_w:stride]
    return cols


def _scatter_windows(dcols, xp_shape, stride, dilation):
    n, c, kh, kw, ho, wo = dcols.shape
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * dilation, j * dilation
            dxp[:, :, r0:r0 + span_h:stride, c0:c0 + span_w:stride] += dcols[:, :, i, j]
    return dxp


def conv2d_forward(x, weight, bias, stride=1, dilation=1, padding=0):
    """Cross-correlation of ``x`` (N x Cin x H x W) with ``weight`` (Cout x Cin x kh x kw).

    Returns ``(out, cache)``; the cache feeds :func:`conv2d_backward`.
    """
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects N x C x H x W input, got shape {x.shape}")
    cout, cin, kh, kw = weight.shape
    n, c, h, w = x.shape
    if c != cin:
        raise DimensionError(f"input has {c} channels, layer expects {cin}")
    ho = conv_output_size(h, kh, stride, dilation, padding)
    wo = conv_output_size(w, kw, stride, dilation, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"input {h}x{w} too small: output would be {ho}x{wo}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _windows(xp, kh, kw, stride, dilation, ho, wo).reshape(n, cin * kh * kw, ho * wo)
    out = np.matmul(weight.reshape(cout, -1), cols).reshape(n, cout, ho, wo)
    out += bias.reshape(1, cout, 1, 1)
    cache = (cols, xp.shape, weight, stride, dilation, padding, (ho, wo))
    return out, cache


def conv2d_backward(cache, grad, need_dx=True):
    """Gradients ``(dx, dweight, dbias)`` of :func:`conv2d_forward`.

    ``need_dx=False`` skips the input gradient (``dx`` is then ``None``).
    """
    cols, xp_shape, weight, stride, dilation, padding, (ho, wo) = cache
    n = xp_shape[0]
    cout, cin, kh, kw = weight.shape
    if grad.shape != (n, cout, ho, wo):
        raise DimensionError(f"upstream gradient shape {grad.shape} != output shape {(n, cout, ho, wo)}")
    g = grad.reshape(n, cout, ho * wo)
    dbias = grad.sum(axis=(0, 2, 3))
    dweight = np.einsum("nol,nkl->ok", g, cols, optimize=True).reshape(weight.shape)
    if not need_dx:
        return None, dweight, dbias
    dcols = np.matmul(weight.reshape(cout, -1).T, g).reshape(n, cin, kh, kw, ho, wo)
    dxp = _scatter_windows(dcols, xp_shape, stride, dilation)
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp, dweight, dbias


class Conv2d:
    """2-D convolution; ``padding=None`` selects "same" padding ``dilation*(k-1)//2``."""

    def __init__(self, name, in_ch, out_ch, kernel=3, stride=1, dilation=1, padding=None, rng=None):
        if kernel < 1 or stride < 1 or dilation < 1:
            raise DomainError("kernel, stride and dilation must be positive")
        self.name = name
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride = stride
        self.dilation = dilation
        self._padding = padding
        # False for a layer fed directly by data: its input gradient is never used
        self.input_grad = True
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_ch * kernel * kernel
        self.weight = Param(f"{name}.weight", fan_in_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in))
        self.bias = Param(f"{name}.bias", np.zeros(out_ch))

    @property
    def padding(self) -> int:
        if self._padding is None:
            return self.dilation * (self.kernel - 1) // 2
        return self._padding

    def params(self) -> list[Param]:
        return [self.weight, self.bias]

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        args = (self.kernel, self.stride, self.dilation, self.padding)
        return conv_output_size(h, *args), conv_output_size(w, *args)

    def __call__(self, x, tape: Tape | None = None):
        out, cache = conv2d_forward(x, self.weight.value, self.bias.value,
                                    self.stride, self.dilation, self.padding)
        if tape is not None:
            def backward(g):
                dx, dw, db = conv2d_backward(cache, g, self.input_grad)
                self.weight.grad += dw
                self.bias.grad += db
                return dx
            tape.record(self.name, backward)
        return out


# -- pooling / activations ------------------------------------------------------

def max_pool2d_forward(x, kernel, stride, padding=0):
    n, c, h, w = x.shape
    ho = conv_output_size(h, kernel, stride, 1, padding)
    wo = conv_output_size(w, kernel, stride, 1, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"input {h}x{w} too small for {kernel}x{kernel} pooling")
    xp = x
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    cols = _windows(xp, kernel, kernel, stride, 1, ho, wo).reshape(n, c, kernel * kernel, ho, wo)
    # np.argmax returns the first maximum, i.e. row-major tie-breaking
    idx = cols.argmax(axis=2)
    out = np.take_along_axis(cols, idx[:, :, None], axis=2)[:, :, 0]
    return out, (idx, xp.shape, kernel, stride, padding)


def max_pool2d_backward(cache, grad):
    idx, xp_shape, kernel, stride, padding = cache
    n, c, ho, wo = grad.shape
    dcols = np.zeros((n, c, kernel * kernel, ho, wo), dtype=grad.dtype)
    np.put_along_axis(dcols, idx[:, :, None], grad[:, :, None], axis=2)
    dxp = _scatter_windows(dcols.reshape(n, c, kernel, kernel, ho, wo), xp_shape, stride, 1)
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp


class MaxPool2d:
    def __init__(self, name, kernel=3, stride=2, padding=None):
        self.name = name
        self.kernel = kernel
        self.stride = stride
        self.padding = (kernel - 1) // 2 if padding is None else padding

    def params(self) -> list[Param]:
        return []

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        args = (self.kernel, self.stride, 1, self.padding)
        return conv_output_size(h, *args), conv_output_size(w, *args)

    def __call__(self, x, tape: Tape | None = None):
        out, cache = max_pool2d_forward(x, self.kernel, self.stride, self.padding)
        if tape is not None:
            tape.record(self.name, lambda g: max_pool2d_backward(cache, g))
        return out


def relu(x):
    """Returns ``(max(0, x), mask)``; the derivative at 0 is taken as 0."""
    mask = x > 0
    return x * mask, mask


class ReLU:
    def __init__(self, name="relu"):
        self.name = name

    def params(self) -> list[Param]:
        return []

    def __call__(self, x, tape: Tape | None = None):
        out, mask = relu(x)
        if tape is not None:
            tape.record(self.name, lambda g: g * mask)
        return out


def global_avg_pool(x):
    if x.ndim != 4:
        raise DimensionError(f"expected N x C x H x W, got {x.shape}")
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(grad, spatial):
    h, w = spatial
    return np.broadcast_to(grad[:, :, None, None] / (h * w), grad.shape + (h, w)).copy()


class GlobalAvgPool:
    def __init__(self, name="gap"):
        self.name = name

    def params(self) -> list[Param]:
        return []

    def __call__(self, x, tape: Tape | None = None):
        out = global_avg_pool(x)
        if tape is not None:
            spatial = x.shape[2:]
            tape.record(self.name, lambda g: global_avg_pool_backward(g, spatial))
        return out


class Linear:
    """Affine map ``x @ W.T + b`` over the last axis."""

    def __init__(self, name, in_dim, out_dim, rng=None):
        self.name = name
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Param(f"{name}.weight", fan_in_uniform(rng, (out_dim, in_dim), in_dim))
        self.bias = Param(f"{name}.bias", np.zeros(out_dim))

    def params(self) -> list[Param]:
        return [self.weight, self.bias]

    def __call__(self, x, tape: Tape | None = None):
        if x.shape[-1] != self.weight.value.shape[1]:
            raise DimensionError(f"input dim {x.shape[-1]} != {self.weight.value.shape[1]}")
        out = x @ self.weight.value.T + self.bias.value
        if tape is not None:
            def backward(g):
                self.weight.grad += g.T @ x
                self.bias.grad += g.sum(axis=0)
                return g @ self.weight.value
            tape.record(self.name, backward)
        return out


# -- losses -----------------------------------------------------------------------

def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood over the batch and its gradient w.r.t. ``logits``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} and labels {labels.shape} do not align")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DomainError(f"labels must lie in [0, {k})")
    labels = labels.astype(np.intp)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(n)
    loss = -log_p[rows, labels].mean()
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    grad /= n
    return float(loss), grad


def pixel_softmax_cross_entropy(logits, labels):
    """Per-pixel cross-entropy for ``logits`` N x K x H x W against labels N x H x W."""
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise DimensionError(f"label map {labels.shape} does not match logits {logits.shape}")
    flat = logits.transpose(0, 2, 3, 1).reshape(-1, k)
    loss, g = softmax_cross_entropy(flat, labels.reshape(-1))
    return loss, g.reshape(n, h, w, k).transpose(0, 3, 1, 2)
