import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import max_diff, qkv
from vir import accounting
from vir.errors import DimensionError, ParameterError
from vir.retention1d import (
    ChunkParams,
    RetentionState1D,
    build_decay_mask_1d,
    retention_chunkwise,
    retention_parallel,
    retention_parallel_backward,
    retention_recurrent,
    retention_recurrent_step,
)
from vir.verify import numerical_gradient, relative_error


def double_sum(q, k, v, gamma, scale):
    n = q.shape[0]
    out = np.zeros((n, v.shape[1]))
    for i in range(n):
        for m in range(i + 1):
            out[i] += gamma ** (i - m) * (q[i] @ k[m]) / scale * v[m]
    return out


class TestDecayMask:
    def test_half(self):
        assert build_decay_mask_1d(3, 0.5).tolist() == [[1, 0, 0], [0.5, 1, 0], [0.25, 0.5, 1]]

    def test_gamma_zero_is_identity(self):
        assert np.array_equal(build_decay_mask_1d(2, 0.0), np.eye(2))

    def test_gamma_one_is_lower_triangle(self):
        assert np.array_equal(build_decay_mask_1d(4, 1.0), np.tril(np.ones((4, 4))))

    @pytest.mark.parametrize("gamma", [-0.1, 1.5])
    def test_rejects_gamma(self, gamma):
        with pytest.raises(ParameterError):
            build_decay_mask_1d(3, gamma)

    @settings(max_examples=40, deadline=None)
    @given(n=st.integers(1, 20), gamma=st.floats(0.0, 1.0))
    def test_structure(self, n, gamma):
        m = build_decay_mask_1d(n, gamma)
        assert np.all(np.diag(m) == 1.0)
        assert np.all(np.triu(m, 1) == 0.0)
        for i in range(n):
            for j in range(i + 1):
                assert m[i, j] == pytest.approx(gamma ** (i - j), rel=1e-15, abs=1e-291)
                for l in range(j + 1):
                    assert m[i, j] * m[j, l] == pytest.approx(m[i, l], rel=1e-12, abs=1e-290)


class TestParallel:
    def test_single_token(self):
        q, k, v = qkv(1, 1, 3)
        out = retention_parallel(q, k, v, 0.7, 2.0)
        assert np.allclose(out, (q[0] @ k[0]) / 2.0 * v, rtol=1e-15)

    def test_gamma_zero_decouples(self):
        q, k, v = qkv(2, 5, 3)
        out = retention_parallel(q, k, v, 0.0, 1.5)
        ref = np.sum(q * k, axis=1, keepdims=True) / 1.5 * v
        assert max_diff(out, ref) <= 1e-15

    def test_vs_double_sum(self):
        q, k, v = qkv(3, 16, 8)
        scale = math.sqrt(8)
        assert max_diff(retention_parallel(q, k, v, 0.9, scale), double_sum(q, k, v, 0.9, scale)) <= 1e-12

    def test_errors(self):
        q, k, v = qkv(0, 4, 3)
        with pytest.raises(DimensionError):
            retention_parallel(q, k[:3], v, 0.5, 1.0)
        with pytest.raises(ParameterError):
            retention_parallel(q, k, v, 0.5, 0.0)

    def test_float32_keeps_dtype(self):
        q, k, v = (x.astype(np.float32) for x in qkv(0, 6, 4))
        assert retention_parallel(q, k, v, 0.9, 2.0).dtype == np.float32

    def test_causality(self):
        q, k, v = qkv(4, 12, 4)
        base = retention_parallel(q, k, v, 0.9, 2.0)
        for t in (0, 5, 11):
            k2, v2 = k.copy(), v.copy()
            k2[t] += 1.0
            v2[t] -= 0.5
            out = retention_parallel(q, k2, v2, 0.9, 2.0)
            assert np.array_equal(out[:t], base[:t])
            assert np.all(np.abs(out[t:] - base[t:]).sum(axis=1) > 0)


class TestRecurrent:
    def test_first_step(self):
        q, k, v = qkv(5, 1, 3)
        state = RetentionState1D.fresh(3, 3, 0.8)
        assert state.position == 0 and not state.s.any()
        new, out = retention_recurrent_step(state, q[0], k[0], v[0], 2.0)
        assert np.allclose(out, (q[0] @ k[0]) / 2.0 * v[0], rtol=1e-15)
        assert new.position == 1

    def test_gamma_zero_forgets(self):
        q, k, v = qkv(6, 4, 2)
        state = RetentionState1D.fresh(2, 2, 0.0)
        for t in range(4):
            state, out = retention_recurrent_step(state, q[t], k[t], v[t], 1.0)
            assert np.allclose(out, (q[t] @ k[t]) * v[t], rtol=1e-15)

    def test_matches_parallel(self):
        q, k, v = qkv(7, 32, 6)
        assert max_diff(retention_recurrent(q, k, v, 0.9, 3.0),
                        retention_parallel(q, k, v, 0.9, 3.0)) <= 1e-9

    def test_state_closed_form(self):
        q, k, v = qkv(8, 10, 3, 5)
        gamma = 0.85
        state = RetentionState1D.fresh(3, 5, gamma)
        for n in range(10):
            state, _ = retention_recurrent_step(state, q[n], k[n], v[n], 1.0)
            direct = sum(gamma ** (n - m) * np.outer(k[m], v[m]) for m in range(n + 1))
            assert max_diff(state.s, direct) <= 1e-12
        assert state.position == 10

    def test_dimension_mismatch(self):
        state = RetentionState1D.fresh(3, 3, 0.5)
        with pytest.raises(DimensionError):
            retention_recurrent_step(state, np.ones(2), np.ones(3), np.ones(3), 1.0)

    def test_accounted_state_is_length_independent(self):
        peaks = []
        for n in (4, 64, 300):
            q, k, v = qkv(9, n, 4)
            with accounting.metered() as meter:
                retention_recurrent(q, k, v, 0.9, 2.0)
            peaks.append(meter.peak)
            assert meter.live == 0
        assert len(set(peaks)) == 1


class TestChunkwise:
    def test_single_chunk_is_parallel(self):
        q, k, v = qkv(10, 9, 4)
        for c in (9, 20):
            out = retention_chunkwise(q, k, v, ChunkParams(c, 0.9), 2.0)
            assert max_diff(out, retention_parallel(q, k, v, 0.9, 2.0)) <= 1e-14

    def test_chunk_of_one_is_recurrent(self):
        q, k, v = qkv(11, 9, 4)
        out = retention_chunkwise(q, k, v, ChunkParams(1, 0.9), 2.0)
        assert max_diff(out, retention_recurrent(q, k, v, 0.9, 2.0)) <= 1e-12

    def test_ragged_last_chunk(self):
        q, k, v = qkv(12, 17, 5)
        out = retention_chunkwise(q, k, v, ChunkParams(5, 0.9), 2.0)
        assert max_diff(out, retention_parallel(q, k, v, 0.9, 2.0)) <= 1e-9

    def test_rejects_chunk_size(self):
        with pytest.raises(ParameterError):
            ChunkParams(0, 0.5)

    def test_accounted_peak_scales_with_chunk_not_length(self):
        def peak(n, c):
            q, k, v = qkv(13, n, 4)
            with accounting.metered() as meter:
                retention_chunkwise(q, k, v, ChunkParams(c, 0.9), 2.0)
            return meter.peak
        assert peak(64, 8) == peak(512, 8)
        assert peak(512, 16) > peak(512, 8)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 64), gamma=st.sampled_from([0.0, 0.25, 0.9, 1 - 2 ** -5]),
       d=st.sampled_from([4, 16]), seed=st.integers(0, 2 ** 32))
def test_mode_equivalence(n, gamma, d, seed):
    q, k, v = qkv(seed, n, d)
    scale = math.sqrt(d)
    ref = retention_parallel(q, k, v, gamma, scale)
    assert max_diff(ref, retention_recurrent(q, k, v, gamma, scale)) <= 1e-9
    for c in (1, 3, 8, n, n + 7):
        assert max_diff(ref, retention_chunkwise(q, k, v, ChunkParams(c, gamma), scale)) <= 1e-9


class TestBackward:
    def test_zero_upstream(self):
        q, k, v = qkv(14, 5, 3)
        for g in retention_parallel_backward(q, k, v, 0.8, 1.0, np.zeros((5, 3))):
            assert not g.any()

    def test_single_token_grad_v(self):
        q, k, v = qkv(15, 1, 3)
        grad_out = np.array([[0.3, -1.0, 2.0]])
        _, _, gv = retention_parallel_backward(q, k, v, 0.8, 2.0, grad_out)
        assert np.allclose(gv, (q[0] @ k[0]) / 2.0 * grad_out, rtol=1e-15)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_finite_differences(self, seed):
        q, k, v = qkv(100 + seed, 6, 4)
        weight = qkv(200 + seed, 6, 4)[0]

        def loss():
            return float(np.sum(retention_parallel(q, k, v, 0.8, 2.0) * weight))

        grads = retention_parallel_backward(q, k, v, 0.8, 2.0, weight)
        for analytic, x in zip(grads, (q, k, v)):
            assert relative_error(analytic, numerical_gradient(loss, x, 1e-5)) <= 1e-6

    def test_shape_error(self):
        q, k, v = qkv(0, 4, 3)
        with pytest.raises(DimensionError):
            retention_parallel_backward(q, k, v, 0.5, 1.0, np.zeros((3, 3)))
