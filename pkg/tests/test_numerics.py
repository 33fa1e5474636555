"""Dense linear algebra kernel tests, oracle-first."""

import numpy as np
import pytest

from hquant.errors import DimensionMismatch, NotPositiveDefinite, TooFewRows
from hquant.numerics import (
    as_matrix,
    center_rows,
    least_squares,
    matmul,
    solve_spd,
)


def naive_matmul(a, b):
    """Triple-loop oracle, no numpy dot involved."""
    n, k = a.shape
    k2, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        a = np.arange(6.0).reshape(2, 3)
        assert np.array_equal(matmul(np.eye(2), a), a)

    def test_hand_arithmetic(self):
        out = matmul([[1, 2], [3, 4]], [[0], [1]])
        assert np.array_equal(out, [[2], [4]])

    def test_against_naive_oracle(self, rng):
        a = rng.normal(size=(7, 5))
        b = rng.normal(size=(5, 3))
        assert np.abs(matmul(a, b) - naive_matmul(a, b)).max() < 1e-12

    def test_associativity(self, rng):
        for _ in range(10):
            a = rng.normal(size=(4, 6))
            b = rng.normal(size=(6, 5))
            c = rng.normal(size=(5, 3))
            left = matmul(matmul(a, b), c)
            right = matmul(a, matmul(b, c))
            assert np.abs(left - right).max() / np.abs(left).max() < 1e-9

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            as_matrix([[1.0, np.nan]])


class TestCenterRows:
    def test_constant_columns_map_to_zero(self):
        x = np.full((5, 3), 2.5)
        assert np.abs(center_rows(x)).max() == 0.0

    def test_idempotent(self, rng):
        x = rng.normal(size=(20, 4))
        c = center_rows(x)
        assert np.abs(center_rows(c) - c).max() < 1e-14

    def test_mean_subtraction(self):
        assert np.array_equal(center_rows([[1.0], [3.0]]), [[-1.0], [1.0]])

    def test_column_means_vanish(self, rng):
        x = rng.normal(size=(33, 7)) * 10 + 5
        assert np.abs(center_rows(x).mean(axis=0)).max() < 1e-12

    def test_linearity(self, rng):
        x = rng.normal(size=(12, 5))
        y = rng.normal(size=(12, 5))
        a, b = 2.5, -1.25
        lhs = center_rows(a * x + b * y)
        rhs = a * center_rows(x) + b * center_rows(y)
        assert np.abs(lhs - rhs).max() < 1e-12

    def test_too_few_rows(self):
        with pytest.raises(TooFewRows):
            center_rows(np.ones((1, 3)))


class TestSolveSpd:
    def test_identity_system(self, rng):
        b = rng.normal(size=(4, 2))
        assert np.abs(solve_spd(np.eye(4), b) - b).max() < 1e-12

    def test_scalar_system(self):
        x = solve_spd(2 * np.eye(2), [[4.0], [6.0]])
        assert np.abs(x - [[2.0], [3.0]]).max() < 1e-12

    def test_residual_on_random_spd(self, rng):
        g = rng.normal(size=(5, 5))
        a = g.T @ g + np.eye(5)
        b = rng.normal(size=(5, 3))
        x = solve_spd(a, b)
        assert np.linalg.norm(a @ x - b) / np.linalg.norm(b) < 1e-8

    def test_damping_changes_system(self, rng):
        g = rng.normal(size=(4, 4))
        a = g.T @ g + np.eye(4)
        b = rng.normal(size=(4, 1))
        lam = 0.5 * np.mean(np.diag(a))
        x = solve_spd(a, b, damping=0.5)
        assert np.linalg.norm((a + lam * np.eye(4)) @ x - b) < 1e-8

    def test_not_positive_definite(self):
        with pytest.raises(NotPositiveDefinite):
            solve_spd(-np.eye(3), np.ones((3, 1)))

    def test_shape_errors(self):
        with pytest.raises(DimensionMismatch):
            solve_spd(np.ones((2, 3)), np.ones((2, 1)))
        with pytest.raises(DimensionMismatch):
            solve_spd(np.eye(3), np.ones((2, 1)))


class TestLeastSquares:
    def test_perfect_alignment_gives_identity(self, rng):
        x = rng.normal(size=(30, 6))
        m = least_squares(x, x).m
        assert np.abs(m - np.eye(6)).max() < 1e-8

    def test_exactly_realizable(self, rng):
        x = rng.normal(size=(40, 5))
        k = rng.normal(size=(5, 5))
        res = least_squares(x, x @ k)
        assert np.abs(res.m - k).max() < 1e-8

    def test_beats_random_candidates(self, rng):
        # the fitted M must beat 100 random matrices tried by the oracle
        x_q = rng.normal(size=(64, 8))
        x_fp = rng.normal(size=(64, 8))
        m = least_squares(x_q, x_fp).m
        fitted = np.linalg.norm(x_fp - x_q @ m)
        for _ in range(100):
            cand = rng.normal(size=(8, 8))
            assert fitted <= np.linalg.norm(x_fp - x_q @ cand) + 1e-12

    def test_never_worse_than_identity(self, rng):
        for trial in range(20):
            x_q = rng.normal(size=(16, 4))
            x_fp = rng.normal(size=(16, 4))
            res = least_squares(x_q, x_fp)
            assert (np.linalg.norm(x_fp - x_q @ res.m)
                    <= np.linalg.norm(x_fp - x_q) + 1e-9)

    def test_rank_deficient_flagged(self, rng):
        col = rng.normal(size=(20, 1))
        x_q = np.hstack([col, col, col])  # rank 1
        x_fp = rng.normal(size=(20, 3))
        res = least_squares(x_q, x_fp)
        assert res.rank_deficient
        assert np.isfinite(res.m).all()

    def test_underdetermined_rejected(self, rng):
        with pytest.raises(DimensionMismatch):
            least_squares(rng.normal(size=(3, 5)), rng.normal(size=(3, 2)))

    def test_row_mismatch_rejected(self, rng):
        with pytest.raises(DimensionMismatch):
            least_squares(rng.normal(size=(6, 2)), rng.normal(size=(5, 2)))
