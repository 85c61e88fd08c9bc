"""Dense array primitives and the deterministic splitmix64 generator.

Arrays are plain row-major ``numpy.ndarray`` values. float64 is the default
element type; float32 is accepted wherever the inputs already carry it.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from vir.errors import DimensionError, ParameterError

_MASK64 = (1 << 64) - 1


class Rng:
    """splitmix64 stream. Identical seeds give identical streams everywhere."""

    def __init__(self, seed: int = 0):
        self.state = seed & _MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def next_block(self, count: int) -> np.ndarray:
        """The next ``count`` outputs as a uint64 array (same values as ``next``)."""
        steps = np.arange(1, count + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(0x9E3779B97F4A7C15)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        self.state = (self.state + count * 0x9E3779B97F4A7C15) & _MASK64
        return z ^ (z >> np.uint64(31))

    def random(self) -> float:
        """Top 53 bits of the next output mapped to [0, 1)."""
        return (self.next() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        x = lo + (hi - lo) * self.random()
        # rounding of lo + (hi-lo)*u can land on hi when hi-lo is tiny
        return x if x < hi else math.nextafter(hi, lo)


def fill_uniform(rng: Rng, shape, lo: float = -0.02, hi: float = 0.02,
                 dtype=np.float64) -> np.ndarray:
    if not lo < hi:
        raise ParameterError(f"fill_uniform needs lo < hi, got lo={lo}, hi={hi}")
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    count = math.prod(shape)
    unit = (rng.next_block(count) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
    data = lo + (hi - lo) * unit
    data = data.reshape(shape).astype(dtype, copy=False)
    top = np.nextafter(data.dtype.type(hi), data.dtype.type(lo))
    return np.minimum(data, top)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise DimensionError(f"hadamard: shapes {a.shape} and {b.shape} differ")
    return a * b


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray,
               eps: float = 1e-6) -> np.ndarray:
    """Normalize each row to zero mean, unit biased variance, then affine."""
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if d < 1 or gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: input {x.shape} vs gain {gain.shape}, bias {bias.shape}")
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + eps) * gain + bias


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU, x * Phi(x)."""
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))
