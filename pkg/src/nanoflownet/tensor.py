"""Dense NHWC tensors and the int8 quantized container.

Tensors are plain ``numpy.ndarray`` objects of rank 4 laid out
batch -> height -> width -> channels (row-major). The helpers here exist
to pin down construction, validation at ingestion boundaries and the
deterministic reductions the rest of the package relies on.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
MAX_ELEMENTS = 2**40


class TensorError(ValueError):
    """Raised for malformed tensors or invalid reductions."""


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if any(d < 0 for d in shape):
        raise TensorError(f"negative dimension in shape {shape}")
    total = 1
    for d in shape:
        total *= d
        if total > MAX_ELEMENTS:
            raise TensorError(f"shape {shape} overflows the element limit")
    return shape


def tensor_new(shape: Sequence[int], fill: float = 0.0) -> np.ndarray:
    """Return a tensor of ``shape`` with every element set to ``fill``."""
    return np.full(_check_shape(shape), fill, dtype=DTYPE)


def as_tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Ingest external data as a float tensor, rejecting NaN/Inf.

    This is the only place non-finite values are checked; kernels assume
    clean inputs.
    """
    arr = np.array(data, dtype=DTYPE)
    if shape is not None:
        shape = _check_shape(shape)
        if arr.size != int(np.prod(shape, dtype=np.int64)):
            raise TensorError(f"data of length {arr.size} does not fit shape {shape}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise TensorError("non-finite values in external input")
    return arr


def map_unary(t: np.ndarray, f: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Apply ``f`` elementwise; ``f`` receives the whole array (vectorized)."""
    out = np.asarray(f(t), dtype=DTYPE)
    if out.shape != t.shape:
        raise TensorError("map_unary function changed the shape")
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=DTYPE)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def reduce_sum(t: np.ndarray, axes: Iterable[int] = ()) -> np.ndarray:
    """Sum over ``axes`` with a strictly sequential accumulation order.

    Elements of each reduced block are added in ascending flat index, so
    the result is bitwise-identical to a naive loop and across runs.
    ``numpy.sum`` uses pairwise summation and would not match a loop.
    """
    axes = tuple(axes)
    for a in axes:
        if not -t.ndim <= a < t.ndim:
            raise TensorError(f"invalid axis {a} for rank {t.ndim}")
    axes = tuple(sorted({a % t.ndim for a in axes}))
    if not axes:
        return np.array(t, dtype=DTYPE, copy=True)
    keep = [a for a in range(t.ndim) if a not in axes]
    moved = np.transpose(t, keep + list(axes))
    kept_shape = tuple(t.shape[a] for a in keep)
    flat = moved.reshape(kept_shape + (-1,))
    if flat.shape[-1] == 0:
        return np.zeros(kept_shape, dtype=DTYPE)
    return np.cumsum(flat, axis=-1, dtype=DTYPE)[..., -1]


@dataclass(frozen=True)
class QuantTensor:
    """int8 payload with affine parameters: real = (q - zero_point) * scale.

    ``scale`` and ``zero_point`` are scalars for per-tensor quantization or
    1-D arrays indexed by ``axis`` for per-channel quantization.
    """

    data: np.ndarray
    scale: np.ndarray | float
    zero_point: np.ndarray | int = 0
    axis: int | None = None

    def __post_init__(self):
        if self.data.dtype != np.int8:
            raise TensorError("QuantTensor payload must be int8")
        if np.any(np.asarray(self.scale) <= 0):
            raise TensorError("quantization scale must be positive")
        zp = np.asarray(self.zero_point)
        if np.any(zp < -128) or np.any(zp > 127):
            raise TensorError("zero_point outside [-128, 127]")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def _bcast(self, v):
        v = np.asarray(v)
        if self.axis is None or v.ndim == 0:
            return v
        shape = [1] * self.data.ndim
        shape[self.axis] = -1
        return v.reshape(shape)

    def dequantize(self) -> np.ndarray:
        q = self.data.astype(DTYPE)
        return (q - self._bcast(self.zero_point)) * self._bcast(self.scale)
