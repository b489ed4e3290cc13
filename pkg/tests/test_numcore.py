import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from clipkd.errors import InputError
from clipkd.numcore import (RngStream, center_columns, l2_normalize_rows,
                            logsumexp_rows, matmul, softmax_rows)

finite_matrices = hnp.arrays(
    np.float64, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=6),
    elements=st.floats(-50, 50))


class TestMatmul:
    def test_identity(self):
        eye = np.eye(2)
        assert np.array_equal(matmul(eye, eye), eye)

    def test_identity_right(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(a, np.eye(2)), a)

    def test_hand_arithmetic(self):
        out = matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))
        assert np.array_equal(out, np.array([[11.0]]))

    def test_dimension_mismatch(self):
        with pytest.raises(InputError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_repeat_calls_bit_identical(self, rng):
        a = rng.normal(size=(5, 7))
        b = rng.normal(size=(7, 3))
        first = matmul(a, b)
        for _ in range(3):
            assert np.array_equal(matmul(a, b), first)

    def test_rejects_non_finite(self):
        bad = np.array([[np.nan, 1.0]])
        with pytest.raises(InputError):
            matmul(bad, np.ones((2, 1)))


class TestNormalizeRows:
    def test_three_four_five(self):
        out = l2_normalize_rows(np.array([[3.0, 4.0]]))
        assert np.allclose(out, [[0.6, 0.8]], atol=0, rtol=1e-15)

    def test_zero_row_preserved(self):
        out = l2_normalize_rows(np.array([[0.0, 0.0]]), eps=1e-12)
        assert np.array_equal(out, [[0.0, 0.0]])

    def test_ones_row(self):
        out = l2_normalize_rows(np.array([[1.0, 1.0]]))
        assert np.allclose(out, [[0.70710678, 0.70710678]], atol=1e-8)

    @settings(max_examples=30, deadline=None)
    @given(finite_matrices)
    def test_idempotent(self, m):
        # idempotence holds for rows that are exactly zero or have norm
        # >= eps; rows inside (0, eps) are rescaled by 1/eps per the
        # max(norm, eps) rule and are excluded here
        norms = np.sqrt(np.sum(m * m, axis=1))
        m = m[(norms == 0.0) | (norms >= 1e-12)]
        if m.size == 0:
            return
        once = l2_normalize_rows(m)
        twice = l2_normalize_rows(once)
        assert np.max(np.abs(twice - once)) <= 1e-12

    def test_sub_eps_rows_scale_by_inverse_eps(self):
        out = l2_normalize_rows(np.array([[1e-30, 0.0]]), eps=1e-12)
        assert np.allclose(out, [[1e-18, 0.0]], rtol=1e-12)


class TestSoftmaxRows:
    def test_uniform_on_equal_logits(self):
        out = softmax_rows(np.array([[5.0, 5.0, 5.0]]))
        assert np.allclose(out, [[1 / 3] * 3], atol=1e-15)

    def test_stable_on_large_logits(self):
        out = softmax_rows(np.array([[700.0, -700.0]]))
        assert np.all(np.isfinite(out))
        assert out[0, 0] > 1 - 1e-12
        assert out[0, 1] < 1e-12

    def test_sigmoid_oracle(self):
        # softmax([1, 0]) == [sigmoid(1), 1 - sigmoid(1)]
        sigmoid = 1.0 / (1.0 + np.exp(-1.0))
        out = softmax_rows(np.array([[1.0, 0.0]]))
        assert np.allclose(out, [[sigmoid, 1 - sigmoid]], atol=1e-12)
        assert np.allclose(out, [[0.73105858, 0.26894142]], atol=1e-8)

    @settings(max_examples=30, deadline=None)
    @given(finite_matrices)
    def test_rows_sum_to_one(self, logits):
        out = softmax_rows(logits)
        assert np.max(np.abs(out.sum(axis=1) - 1.0)) <= 1e-12

    @settings(max_examples=30, deadline=None)
    @given(finite_matrices, st.floats(-30, 30))
    def test_shift_invariance(self, logits, shift):
        out = softmax_rows(logits)
        shifted = softmax_rows(logits + shift)
        assert np.max(np.abs(out - shifted)) <= 1e-12


class TestCenterColumns:
    def test_mean_removal(self):
        assert np.array_equal(center_columns(np.array([[1.0], [3.0]])), [[-1.0], [1.0]])

    def test_single_row_becomes_zero(self):
        assert np.array_equal(center_columns(np.array([[2.0, -7.0]])), [[0.0, 0.0]])

    def test_hand_arithmetic(self):
        out = center_columns(np.array([[1.0, 2.0], [3.0, 6.0]]))
        assert np.array_equal(out, [[-1.0, -2.0], [1.0, 2.0]])


def test_logsumexp_matches_naive():
    z = np.array([[0.1, -0.4, 2.0], [5.0, 5.0, 5.0]])
    naive = np.log(np.exp(z).sum(axis=1))
    assert np.allclose(logsumexp_rows(z), naive, atol=1e-12)


class TestRngStream:
    def test_same_key_same_sequence(self):
        a = RngStream(7, 3).normal(size=16)
        b = RngStream(7, 3).normal(size=16)
        assert np.array_equal(a, b)

    def test_distinct_streams_differ(self):
        a = RngStream(7, 3).normal(size=16)
        b = RngStream(7, 4).normal(size=16)
        assert not np.array_equal(a, b)

    def test_distinct_seeds_differ(self):
        a = RngStream(7, 3).normal(size=16)
        b = RngStream(8, 3).normal(size=16)
        assert not np.array_equal(a, b)

    def test_split_is_stream_offset(self):
        base = RngStream(7, 3)
        assert np.array_equal(base.split(2).normal(size=4), RngStream(7, 5).normal(size=4))

    def test_stream_correlation_is_low(self):
        # crude independence check between sibling streams
        a = RngStream(0, 1).normal(size=4096)
        b = RngStream(0, 2).normal(size=4096)
        corr = float(np.corrcoef(a, b)[0, 1])
        assert abs(corr) < 0.06
