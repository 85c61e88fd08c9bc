"""1D retention in parallel, recurrent and chunkwise form.

All three modes compute

    out[n] = sum_{m <= n} gamma**(n - m) * (q[n] . k[m] / scale) * v[m]

and agree to floating-point reassociation. The query is divided by ``scale``
once, before any product, in every mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from vir import accounting
from vir.errors import DimensionError, ParameterError


def _check_gamma(gamma: float) -> None:
    if not 0.0 <= gamma <= 1.0:
        raise ParameterError(f"decay gamma must lie in [0, 1], got {gamma}")


def _check_qkv(q, k, v, scale) -> None:
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError(f"q, k, v must be 2-D, got {q.shape}, {k.shape}, {v.shape}")
    if q.shape != k.shape or v.shape[0] != q.shape[0]:
        raise DimensionError(f"incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    if not scale > 0:
        raise ParameterError(f"scale must be positive, got {scale}")


def flush_tiny(weights: np.ndarray) -> np.ndarray:
    """Zero decay weights below ``tiny / eps`` of their dtype, in place.

    Products with such weights would be subnormal, which is both below the
    dtype's resolution relative to the unit diagonal and very slow on common
    CPUs.
    """
    info = np.finfo(weights.dtype)
    weights[weights < info.tiny / info.eps] = 0
    return weights


def decay_powers(n: int, gamma: float, dtype=np.float64) -> np.ndarray:
    """gamma**0, ..., gamma**(n-1), with 0**0 == 1."""
    return flush_tiny(np.asarray(gamma, dtype=dtype) ** np.arange(n, dtype=dtype))


def _decay_mask_view(n: int, gamma: float, dtype) -> np.ndarray:
    # row i is a length-n window of [gamma**(n-1), ..., gamma**0, 0, ..., 0]
    padded = np.concatenate([decay_powers(n, gamma, dtype)[::-1], np.zeros(n - 1, dtype)])
    return sliding_window_view(padded, n)[::-1]


def build_decay_mask_1d(n: int, gamma: float, dtype=np.float64) -> np.ndarray:
    """Causal decay mask: ``M[i, j] = gamma**(i-j)`` for i >= j, else 0."""
    if n < 1:
        raise ParameterError(f"mask length must be >= 1, got {n}")
    _check_gamma(gamma)
    return np.ascontiguousarray(_decay_mask_view(n, gamma, dtype))


def retention_parallel(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                       gamma: float, scale: float) -> np.ndarray:
    """Whole-sequence form ``((q / scale) k^T * M) v``.

    The N x N score matrix is materialized; the mask is applied through a
    strided view of its 2N-1 distinct values.
    """
    _check_qkv(q, k, v, scale)
    _check_gamma(gamma)
    n = q.shape[0]
    live = n * n + 2 * n - 1
    accounting.alloc(live)
    scores = (q / scale) @ k.T
    scores *= _decay_mask_view(n, gamma, scores.dtype)
    out = scores @ v
    accounting.free(live)
    return out


def retention_parallel_backward(q, k, v, gamma: float, scale: float,
                                grad_out: np.ndarray):
    """Gradients of ``retention_parallel`` w.r.t. q, k and v."""
    _check_qkv(q, k, v, scale)
    if grad_out.shape != (q.shape[0], v.shape[1]):
        raise DimensionError(f"grad_out {grad_out.shape} does not match output "
                             f"{(q.shape[0], v.shape[1])}")
    mask = build_decay_mask_1d(q.shape[0], gamma, dtype=np.result_type(q, k, v))
    scores = ((q / scale) @ k.T) * mask
    grad_v = scores.T @ grad_out
    g = (grad_out @ v.T) * mask
    grad_q = g @ k / scale
    grad_k = g.T @ q / scale
    return grad_q, grad_k, grad_v


@dataclass
class RetentionState1D:
    """Recurrent accumulator ``s = sum_m gamma**(n-m) k_m^T v_m``."""

    s: np.ndarray
    gamma: float
    position: int = 0

    @classmethod
    def fresh(cls, dk: int, dv: int, gamma: float, dtype=np.float64) -> "RetentionState1D":
        _check_gamma(gamma)
        return cls(np.zeros((dk, dv), dtype=dtype), gamma, 0)


def retention_recurrent_step(state: RetentionState1D, q_n, k_n, v_n, scale: float):
    """Absorb one token. Returns ``(new_state, output_row)``."""
    dk, dv = state.s.shape
    if q_n.shape != (dk,) or k_n.shape != (dk,) or v_n.shape != (dv,):
        raise DimensionError(f"token dims q {q_n.shape}, k {k_n.shape}, v {v_n.shape} "
                             f"do not match state {state.s.shape}")
    if not scale > 0:
        raise ParameterError(f"scale must be positive, got {scale}")
    s = state.gamma * state.s + np.outer(k_n, v_n)
    out = (q_n / scale) @ s
    return RetentionState1D(s, state.gamma, state.position + 1), out


def retention_recurrent(q, k, v, gamma: float, scale: float) -> np.ndarray:
    """Stream a whole sequence through :func:`retention_recurrent_step`."""
    _check_qkv(q, k, v, scale)
    n, dk = q.shape
    dv = v.shape[1]
    state = RetentionState1D.fresh(dk, dv, gamma, dtype=np.result_type(q, k, v))
    # state, outer-product scratch, one output row
    live = 2 * dk * dv + dv
    accounting.alloc(live)
    out = np.empty((n, dv), dtype=state.s.dtype)
    for t in range(n):
        state, out[t] = retention_recurrent_step(state, q[t], k[t], v[t], scale)
    accounting.free(live)
    return out


@dataclass
class ChunkParams:
    chunk_size: int
    gamma: float

    def __post_init__(self):
        if self.chunk_size < 1:
            raise ParameterError(f"chunk size must be >= 1, got {self.chunk_size}")
        _check_gamma(self.gamma)


def retention_chunkwise(q, k, v, params: ChunkParams, scale: float) -> np.ndarray:
    """Parallel inside each chunk, recurrent carry between chunks.

    For a chunk of actual length ``c`` and inner position ``i``:

        out_i = ((q k^T / scale) * M_c) v  +  gamma**(i+1) (q_i / scale) R_prev
        R     = k^T (v * gamma**(c-1-i)) + gamma**c R_prev
    """
    _check_qkv(q, k, v, scale)
    n, dk = q.shape
    dv = v.shape[1]
    gamma, size = params.gamma, params.chunk_size
    dtype = np.result_type(q, k, v)
    carry = np.zeros((dk, dv), dtype=dtype)
    out = np.empty((n, dv), dtype=dtype)
    accounting.alloc(dk * dv)
    for start in range(0, n, size):
        stop = min(start + size, n)
        c = stop - start
        scratch = 2 * c * c + 2 * c * dv + dk * dv
        accounting.alloc(scratch)
        qc = q[start:stop] / scale
        kc, vc = k[start:stop], v[start:stop]
        powers = decay_powers(c + 1, gamma, dtype)
        inner = (qc @ kc.T) * build_decay_mask_1d(c, gamma, dtype)
        cross = (qc @ carry) * powers[1:, None]
        out[start:stop] = inner @ vc + cross
        carry = kc.T @ (vc * powers[c - 1::-1, None]) + powers[c] * carry
        accounting.free(scratch)
    accounting.free(dk * dv)
    return out
