"""Linear CKA tests against the literal centering-matrix formula."""

import numpy as np
import pytest

from hquant.cka import linear_cka, subsample_indices, subsample_rows
from hquant.errors import RowCountMismatch, TooFewRows


def literal_cka(x, y):
    """Materializes H = I - (1/n)11^T and evaluates the definition verbatim."""
    n = x.shape[0]
    h = np.eye(n) - np.ones((n, n)) / n
    xc = h @ x
    yc = h @ y
    num = np.linalg.norm(yc.T @ xc, "fro") ** 2
    den = np.linalg.norm(xc.T @ xc, "fro") * np.linalg.norm(yc.T @ yc, "fro")
    return num / den


class TestLinearCka:
    def test_self_similarity(self, rng):
        for _ in range(5):
            x = rng.normal(size=(30, 7))
            assert abs(linear_cka(x, x).value - 1.0) < 1e-12

    def test_matches_literal_formula(self, rng):
        for _ in range(20):
            x = rng.normal(size=(50, 6))
            y = rng.normal(size=(50, 6)) + 0.5 * x
            assert abs(linear_cka(x, y).value - literal_cka(x, y)) < 1e-10

    def test_different_feature_dims(self, rng):
        x = rng.normal(size=(40, 5))
        y = rng.normal(size=(40, 9))
        assert abs(linear_cka(x, y).value - literal_cka(x, y)) < 1e-10

    def test_isotropic_scale_invariance(self, rng):
        x = rng.normal(size=(25, 4))
        for c in (2.0, -3.5, 1e-3):
            assert abs(linear_cka(x, c * x).value - 1.0) < 1e-9

    def test_orthogonal_invariance(self, rng):
        x = rng.normal(size=(40, 6))
        y = rng.normal(size=(40, 6))
        base = linear_cka(x, y).value
        q1, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        q2, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        assert abs(linear_cka(x @ q1, y @ q2).value - base) < 1e-9

    def test_translation_invariance(self, rng):
        x = rng.normal(size=(30, 5))
        y = rng.normal(size=(30, 5))
        base = linear_cka(x, y).value
        shifted = x + rng.normal(size=(1, 5)) * 100
        assert abs(linear_cka(shifted, y).value - base) < 1e-10

    def test_symmetry(self, rng):
        x = rng.normal(size=(30, 5))
        y = rng.normal(size=(30, 8))
        assert abs(linear_cka(x, y).value - linear_cka(y, x).value) < 1e-12

    def test_independent_data_decays(self):
        rng = np.random.default_rng(99)
        x = rng.normal(size=(5000, 4))
        y = rng.normal(size=(5000, 4))
        assert linear_cka(x, y).value < 0.2

    def test_degenerate_constant_input(self, rng):
        x = np.full((10, 3), 4.2)
        y = rng.normal(size=(10, 3))
        score = linear_cka(x, y)
        assert score.degenerate
        assert score.value == 0.0

    def test_value_in_unit_interval(self, rng):
        for _ in range(50):
            d1, d2 = rng.integers(2, 8, size=2)
            x = rng.normal(size=(20, d1))
            y = rng.normal(size=(20, d2)) + rng.normal() * x[:, :1]
            v = linear_cka(x, y).value
            assert 0.0 <= v <= 1.0

    def test_errors(self, rng):
        with pytest.raises(RowCountMismatch):
            linear_cka(rng.normal(size=(5, 2)), rng.normal(size=(6, 2)))
        with pytest.raises(TooFewRows):
            linear_cka(np.ones((1, 2)), np.ones((1, 2)))


class TestSubsample:
    def test_identity_when_fits(self, rng):
        x = rng.normal(size=(10, 3))
        assert np.array_equal(subsample_rows(x, 20, seed=0), x)

    def test_deterministic(self, rng):
        x = rng.normal(size=(100, 4))
        a = subsample_rows(x, 10, seed=5)
        b = subsample_rows(x, 10, seed=5)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, subsample_rows(x, 10, seed=6))

    def test_paired_selection(self, rng):
        x = rng.normal(size=(50, 3))
        y = x * 2.0
        xs = subsample_rows(x, 8, seed=1)
        ys = subsample_rows(y, 8, seed=1)
        assert np.array_equal(ys, xs * 2.0)

    def test_indices_sorted_unique(self):
        idx = subsample_indices(1000, 100, seed=3)
        assert len(np.unique(idx)) == 100
        assert (np.diff(idx) > 0).all()

    def test_subsample_stability_on_smooth_data(self):
        # low-rank structure + mild noise: CKA estimate is stable under a
        # 4x row subsample
        rng = np.random.default_rng(17)
        n, d, r = 16384, 8, 3
        u = rng.normal(size=(n, r))
        x = u @ rng.normal(size=(r, d)) + 0.1 * rng.normal(size=(n, d))
        y = x @ rng.normal(size=(d, d)) + 0.1 * rng.normal(size=(n, d))
        full = linear_cka(x, y).value
        sub = linear_cka(subsample_rows(x, 4096, seed=0),
                         subsample_rows(y, 4096, seed=0)).value
        assert abs(full - sub) < 0.02

    def test_max_rows_validation(self, rng):
        with pytest.raises(ValueError):
            subsample_rows(rng.normal(size=(5, 2)), 1, seed=0)
