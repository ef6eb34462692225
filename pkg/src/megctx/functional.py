"""Differentiable building blocks shared by the backbone and heads."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, selu, logsigmoid  # noqa: F401  (re-exported)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalization over the last axis, y = gain * x / rms(x)."""
    if x.shape[-1] == 0:
        raise ValueError("rms_norm over a zero-length axis")
    ms = (x * x).mean(axis=-1, keepdims=True)
    return x / (ms + eps).sqrt() * gain


def softmax_rows(z: Tensor) -> Tensor:
    """Softmax over the last axis.  Max-subtraction keeps exp() in range."""
    shift = np.max(z.data, axis=-1, keepdims=True)
    e = (z - shift).exp()
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: Tensor) -> Tensor:
    shift = np.max(z.data, axis=-1, keepdims=True)
    zs = z - shift
    return zs - zs.exp().sum(axis=-1, keepdims=True).log()


def rope_rotation(positions, d: int, base: float = 10000.0, dtype=np.float32):
    """cos/sin tables for rotary position embedding, shape [len(positions), d/2]."""
    if d % 2 != 0:
        raise ValueError("rotary embedding needs an even feature dimension")
    pos = np.asarray(positions, dtype=np.float64)
    inv_freq = base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    ang = pos[:, None] * inv_freq[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope_apply(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    """Rotate feature pairs of x [..., t, d] by position-dependent angles.

    Pairs are interleaved: (x[2i], x[2i+1]) rotates by angle pos * base**(-2i/d).
    Inner products of rotated queries and keys depend only on position offsets.
    """
    d = x.shape[-1]
    cos, sin = rope_rotation(positions, d, base=base, dtype=x.dtype)
    if cos.shape[0] != x.shape[-2]:
        raise ValueError("positions length does not match the time axis")
    x1 = x[..., 0::2]
    x2 = x[..., 1::2]
    o1 = x1 * cos - x2 * sin
    o2 = x1 * sin + x2 * cos
    from .tensor import stack
    return stack([o1, o2], axis=-1).reshape(x.shape)
