"""Dense float32 kernels used by every other module.

Tensors are plain row-major ``numpy.ndarray`` objects of dtype float32. The
functions here never mutate their inputs.
"""

from __future__ import annotations

import math

import numpy as np

RMS_EPS = 1e-6
_GELU_C = math.sqrt(2.0 / math.pi)


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible."""


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a C-contiguous float32 array."""
    return np.ascontiguousarray(x, dtype=np.float32)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product ``a @ b`` over the last two axes of ``a``.

    ``a`` may carry leading batch axes; ``b`` must be 2-D. Accumulation is
    float32 (BLAS sgemm).
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return np.matmul(a, b, dtype=np.float32)


def softmax(x: np.ndarray) -> np.ndarray:
    """Softmax along the last axis with max-subtraction.

    float64 input stays float64; anything else is computed in float32.
    """
    x = np.asarray(x)
    if x.dtype != np.float64:
        x = x.astype(np.float32)
    if x.size == 0:
        return x.copy()
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(x: np.ndarray) -> np.ndarray:
    """Numerically stable log-softmax along the last axis (float64 result)."""
    x = np.asarray(x, dtype=np.float64)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float = RMS_EPS) -> np.ndarray:
    """Scale each row of ``x`` to unit root-mean-square, then apply ``gain``."""
    x = np.asarray(x, dtype=np.float32)
    gain = np.asarray(gain, dtype=np.float32)
    if gain.ndim != 1 or gain.shape[0] != x.shape[-1]:
        raise DimensionError(f"rms_norm gain shape {gain.shape} does not match input {x.shape}")
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return (x / np.sqrt(ms + np.float32(eps)) * gain).astype(np.float32)


def gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation
    x = np.asarray(x, dtype=np.float32)
    inner = np.float32(_GELU_C) * (x + np.float32(0.044715) * x * x * x)
    return (np.float32(0.5) * x * (np.float32(1.0) + np.tanh(inner))).astype(np.float32)
