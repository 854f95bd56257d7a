"""Dense array primitives.

Tensors are plain ``numpy.ndarray`` values in row-major NCHW layout
(kernels: C_out x C_in x k x k).  Every function here is pure: inputs are
never modified and a fresh array is returned.
"""

from __future__ import annotations

import operator
from typing import Callable, Sequence, Union

import numpy as np

from .errors import ShapeError

DTYPES = (np.float32, np.float64)
Scalar = Union[int, float]


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ShapeError("shape must be nonempty")
    if any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    return shape


def _check_dtype(dtype) -> np.dtype:
    dtype = np.dtype(dtype)
    if dtype.type not in DTYPES:
        raise TypeError(f"dtype must be float32 or float64, got {dtype}")
    return dtype


def full(shape: Sequence[int], value: float, dtype=np.float32) -> np.ndarray:
    return np.full(_check_shape(shape), value, dtype=_check_dtype(dtype))


def zeros(shape: Sequence[int], dtype=np.float32) -> np.ndarray:
    return full(shape, 0.0, dtype)


def ones(shape: Sequence[int], dtype=np.float32) -> np.ndarray:
    return full(shape, 1.0, dtype)


_OPS: dict[str, Callable] = {
    "add": operator.add,
    "sub": operator.sub,
    "mul": operator.mul,
    "div": operator.truediv,
}


def elementwise(op: str, a: np.ndarray, b: Union[np.ndarray, Scalar]) -> np.ndarray:
    """Apply ``op`` elementwise; ``b`` must match ``a``'s shape or be a scalar.

    Division by zero follows IEEE semantics (inf / nan) and never raises.
    """
    fn = _OPS[op]
    a = np.asarray(a)
    if np.ndim(b) == 0:
        b = a.dtype.type(b) if a.dtype.kind == "f" else b
    else:
        b = np.asarray(b)
        if b.shape != a.shape:
            raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        return np.asarray(fn(a, b))


def add(a, b):
    return elementwise("add", a, b)


def sub(a, b):
    return elementwise("sub", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def div(a, b):
    return elementwise("div", a, b)


def _as_nchw(x: np.ndarray, name: str) -> np.ndarray:
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected NCHW tensor, got shape {x.shape}")
    return x


def pad2d(x: np.ndarray, pad: int, value: float = 0.0) -> np.ndarray:
    """Pad both spatial axes of an NCHW tensor by ``pad`` pixels per side."""
    _as_nchw(x, "pad2d")
    if pad < 0:
        raise ShapeError(f"pad must be >= 0, got {pad}")
    if pad == 0:
        return x.copy()
    widths = ((0, 0), (0, 0), (pad, pad), (pad, pad))
    return np.pad(x, widths, mode="constant", constant_values=value)


def crop2d(x: np.ndarray, margin: int) -> np.ndarray:
    """Inverse of :func:`pad2d`: strip ``margin`` pixels from every side."""
    _as_nchw(x, "crop2d")
    if margin == 0:
        return x.copy()
    h, w = x.shape[2:]
    if 2 * margin >= min(h, w):
        raise ShapeError(f"margin {margin} too large for {h}x{w}")
    return x[:, :, margin : h - margin, margin : w - margin].copy()


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stack ``b``'s channels after ``a``'s.  Either side may have zero channels."""
    _as_nchw(a, "concat_channels")
    _as_nchw(b, "concat_channels")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat_channels: N/H/W mismatch {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1)


def channel_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and biased variance over N, H, W."""
    _as_nchw(x, "channel_stats")
    mean = x.mean(axis=(0, 2, 3))
    var = ((x - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
    return mean, var
