import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from siglab.core import (
    l2_normalize_rows,
    log_sigmoid,
    matmul,
    ordered_sum,
    row_log_softmax,
    transpose,
)
from siglab.errors import ShapeMismatch, ZeroRow


class TestNormalize:
    def test_three_four_five(self):
        np.testing.assert_array_equal(l2_normalize_rows([[3.0, 4.0]]), [[0.6, 0.8]])

    def test_unit_row_unchanged(self):
        row = np.array([[0.6, 0.8]])
        np.testing.assert_allclose(l2_normalize_rows(row), row, atol=1e-15, rtol=0)

    def test_ones(self):
        np.testing.assert_array_equal(l2_normalize_rows(np.ones((1, 4))), [[0.5] * 4])

    def test_zero_row(self):
        with pytest.raises(ZeroRow):
            l2_normalize_rows([[1.0, 0.0], [0.0, 0.0]])

    def test_idempotent(self, rng):
        x = rng.standard_normal((20, 7)) * 100
        once = l2_normalize_rows(x)
        np.testing.assert_allclose(l2_normalize_rows(once), once, atol=1e-14, rtol=0)
        np.testing.assert_allclose(np.linalg.norm(once, axis=1), 1.0, atol=1e-12)


class TestLogSigmoid:
    def test_zero(self):
        assert log_sigmoid(0.0) == pytest.approx(-0.6931471805599453, abs=1e-16)

    def test_minus_ten_matches_extended_precision(self):
        mpmath.mp.dps = 50
        ref = float(mpmath.log(1 / (1 + mpmath.e**10)))
        assert ref == pytest.approx(-10.0000453989, abs=1e-10)
        assert log_sigmoid(-10.0) == pytest.approx(ref, abs=1e-14)

    def test_saturation(self):
        v = log_sigmoid(1000.0)
        assert math.isfinite(v) and abs(v) <= 1e-300

    @pytest.mark.parametrize("x", [-1e6, -745.0, -40.0, 40.0, 1e6])
    def test_extremes_finite(self, x):
        v = log_sigmoid(x)
        assert math.isfinite(v) and v <= 0

    def test_odd_identity(self):
        x = np.linspace(-50, 50, 2001)
        np.testing.assert_allclose(log_sigmoid(x) - log_sigmoid(-x), x, atol=1e-12, rtol=0)

    def test_vectorized_matches_scalar(self, rng):
        x = rng.uniform(-30, 30, 50)
        np.testing.assert_array_equal(log_sigmoid(x), [log_sigmoid(float(v)) for v in x])


class TestLogSoftmax:
    def test_symmetric_pair(self):
        np.testing.assert_allclose(row_log_softmax([[0.0, 0.0]]), [[-math.log(2)] * 2], atol=1e-15)

    @pytest.mark.parametrize("c", [-1e4, -3.5, 0.0, 7.0, 1e4])
    def test_constant_row(self, c):
        np.testing.assert_allclose(row_log_softmax([[c] * 4]), [[-math.log(4)] * 4], atol=1e-12)

    def test_large_gap_is_stable(self):
        out = row_log_softmax([[1000.0, 0.0]])
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[0.0, -1000.0]], atol=1e-12)

    def test_rows_normalize(self, rng):
        out = row_log_softmax(rng.standard_normal((6, 9)) * 30)
        lse = np.log(np.sum(np.exp(out), axis=1))
        np.testing.assert_allclose(lse, 0.0, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(c=st.floats(-1e4, 1e4), seed=st.integers(0, 10_000))
    def test_shift_invariance(self, c, seed):
        # dyadic grid so that m + c is exactly representable; otherwise the
        # rounding of the input alone exceeds 1e-12 near |c| = 1e4
        m = np.round(np.random.default_rng(seed).standard_normal((3, 5)) * 5 * 2**20) / 2**20
        c = round(c * 2**10) / 2**10
        np.testing.assert_allclose(row_log_softmax(m + c), row_log_softmax(m), atol=1e-12, rtol=0)


def triple_loop(a, b):
    n, k = len(a), len(a[0])
    m = len(b[0])
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for p in range(k):
                s += float(a[i][p]) * float(b[p][j])
            out[i][j] = s
    return np.array(out)


class TestMatmul:
    def test_identity(self, rng):
        m = rng.standard_normal((4, 4))
        np.testing.assert_array_equal(matmul(np.eye(4), m), m)

    def test_ones_dot(self):
        assert matmul(np.ones((1, 7)), np.ones((7, 1)))[0, 0] == 7.0

    @pytest.mark.parametrize("shape", [(3, 3, 3), (5, 11, 2), (1, 40, 6)])
    def test_matches_triple_loop_exactly(self, rng, shape):
        n, k, m = shape
        a = rng.standard_normal((n, k))
        b = rng.standard_normal((k, m))
        np.testing.assert_array_equal(matmul(a, b), triple_loop(a, b))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_block_equals_sub_product(self, rng):
        a = rng.standard_normal((8, 5))
        b = rng.standard_normal((5, 8))
        full = matmul(a, b)
        np.testing.assert_array_equal(matmul(a[2:4], b[:, 4:8]), full[2:4, 4:8])

    def test_transpose(self):
        np.testing.assert_array_equal(transpose([[1.0, 2.0, 3.0]]), [[1.0], [2.0], [3.0]])


def test_ordered_sum_left_to_right():
    vals = [1e16, 1.0, -1e16, 1.0]
    expected = 0.0
    for v in vals:
        expected += v
    assert ordered_sum(vals) == expected
