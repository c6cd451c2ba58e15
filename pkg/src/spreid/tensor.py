"""Dense tensor helpers shared by every stage of the pipeline.

Tensors are plain ``numpy.ndarray`` objects in NCHW order. The helpers here
validate shapes and finiteness, and provide the handful of primitives the
rest of the package composes: matrix products, spatial/vector normalization,
align-corners bilinear resizing and a per-pixel softmax. A small binary
container ("SPRT") is used for feature dumps, images and label grids.
"""

from __future__ import annotations

import struct
import warnings
from pathlib import Path

import numpy as np

__all__ = [
    "DimensionError",
    "DomainError",
    "NonFiniteError",
    "ContainerError",
    "ZeroNormWarning",
    "as_tensor",
    "check_finite",
    "matmul",
    "l1_normalize_spatial",
    "l2_normalize",
    "resize_matrix",
    "bilinear_resize",
    "bilinear_resize_backward",
    "channel_softmax",
    "save_tensor",
    "load_tensor",
    "encode_tensor",
    "decode_tensor",
]

MAGIC = b"SPRT"
FORMAT_VERSION = 1
MAX_RANK = 4


class DimensionError(ValueError):
    """Shapes of the operands are incompatible."""


class DomainError(ValueError):
    """An input lies outside the domain of the operation."""


class NonFiniteError(ValueError):
    """A tensor contains NaN or infinite values."""


class ContainerError(ValueError):
    """A serialized tensor container is malformed."""


class ZeroNormWarning(RuntimeWarning):
    """A zero vector was passed to a normalization that needs a direction."""


def check_finite(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{name} contains non-finite values")
    return x


def as_tensor(data, dtype=np.float64, name: str = "tensor") -> np.ndarray:
    """Convert ``data`` to a contiguous float array with at most four axes."""
    x = np.ascontiguousarray(data, dtype=dtype)
    if x.ndim > MAX_RANK:
        raise DimensionError(f"{name} has rank {x.ndim}; at most {MAX_RANK} axes are supported")
    if any(s < 1 for s in x.shape):
        raise DimensionError(f"{name} has an empty axis: shape {x.shape}")
    return check_finite(x, name)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects matrices, got ranks {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def l1_normalize_spatial(maps: np.ndarray) -> np.ndarray:
    """Scale each channel of ``maps`` (R x H x W) so its entries sum to one.

    A channel with zero total mass becomes the uniform map ``1/(H*W)`` so that
    pooling with it falls back to a spatial average.
    """
    maps = np.asarray(maps, dtype=np.float64 if maps.dtype.kind != "f" else maps.dtype)
    if maps.ndim != 3:
        raise DimensionError(f"expected R x H x W maps, got shape {maps.shape}")
    check_finite(maps, "maps")
    if np.any(maps < 0):
        raise DomainError("probability maps must be non-negative")
    r, h, w = maps.shape
    flat = maps.reshape(r, h * w)
    mass = flat.sum(axis=1, keepdims=True)
    empty = mass[:, 0] == 0
    out = np.empty_like(flat)
    out[~empty] = flat[~empty] / mass[~empty]
    out[empty] = 1.0 / (h * w)
    return out.reshape(r, h, w)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Unit-norm copy of ``v``; the zero vector is returned as-is with a warning."""
    v = np.asarray(v, dtype=np.float64 if np.asarray(v).dtype.kind != "f" else None)
    check_finite(v, "vector")
    norm = np.sqrt(np.sum(v * v))
    if norm == 0:
        warnings.warn("l2_normalize received a zero vector", ZeroNormWarning, stacklevel=2)
        return np.zeros_like(v)
    return v / norm


def resize_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Linear interpolation matrix (n_out x n_in) with aligned corners.

    Output sample ``i`` sits at source coordinate ``i * (n_in - 1) / (n_out - 1)``.
    A single output sample reads source index 0.
    """
    if n_in < 1 or n_out < 1:
        raise DomainError("resize extents must be >= 1")
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if n_out == 1:
        m[0, 0] = 1.0
        return m
    scale = (n_in - 1) / (n_out - 1)
    for i in range(n_out):
        src = i * scale
        lo = min(int(np.floor(src)), n_in - 1)
        frac = src - lo
        if lo == n_in - 1:
            m[i, lo] = 1.0
        else:
            m[i, lo] += 1.0 - frac
            m[i, lo + 1] += frac
    return m


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize the last two axes of ``x`` with align-corners bilinear sampling."""
    if out_h < 1 or out_w < 1:
        raise DomainError(f"target size must be positive, got {(out_h, out_w)}")
    x = np.asarray(x)
    if x.ndim < 2:
        raise DimensionError("bilinear_resize needs at least two spatial axes")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x.copy()
    rh = resize_matrix(h, out_h, x.dtype)
    rw = resize_matrix(w, out_w, x.dtype)
    return np.matmul(np.matmul(rh, x), rw.T)


def bilinear_resize_backward(grad: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    """Adjoint of :func:`bilinear_resize` for an input of spatial size (in_h, in_w)."""
    out_h, out_w = grad.shape[-2:]
    if (in_h, in_w) == (out_h, out_w):
        return grad.copy()
    rh = resize_matrix(in_h, out_h, grad.dtype)
    rw = resize_matrix(in_w, out_w, grad.dtype)
    return np.matmul(np.matmul(rh.T, grad), rw)


def channel_softmax(logits: np.ndarray, axis: int = -3) -> np.ndarray:
    """Softmax over the channel axis (default: the K of ``...xKxHxW``)."""
    logits = np.asarray(logits)
    check_finite(logits, "logits")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


# -- binary container ---------------------------------------------------------

def encode_tensor(x: np.ndarray) -> bytes:
    x = np.asarray(x)
    if not 1 <= x.ndim <= MAX_RANK:
        raise DimensionError(f"container supports rank 1..{MAX_RANK}, got {x.ndim}")
    header = MAGIC + struct.pack("<HB", FORMAT_VERSION, x.ndim)
    header += struct.pack(f"<{x.ndim}I", *x.shape)
    return header + np.ascontiguousarray(x, dtype="<f4").tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 7:
        raise ContainerError(f"truncated container header at offset {len(buf)}")
    if buf[:4] != MAGIC:
        raise ContainerError("bad magic bytes at offset 0")
    version, rank = struct.unpack_from("<HB", buf, 4)
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported container version {version} at offset 4")
    if not 1 <= rank <= MAX_RANK:
        raise ContainerError(f"invalid rank {rank} at offset 6")
    ext_end = 7 + 4 * rank
    if len(buf) < ext_end:
        raise ContainerError(f"truncated extents at offset {len(buf)}")
    shape = struct.unpack_from(f"<{rank}I", buf, 7)
    n_bytes = 4 * int(np.prod(shape))
    if len(buf) != ext_end + n_bytes:
        raise ContainerError(
            f"payload size mismatch at offset {ext_end}: expected {n_bytes} bytes, found {len(buf) - ext_end}"
        )
    return np.frombuffer(buf, dtype="<f4", offset=ext_end).reshape(shape).astype(np.float32)


def save_tensor(path, x: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(x))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())
