"""Linear Centered Kernel Alignment between activation matrices.

Computed via the d x d centered cross-covariance rather than n x n Gram
matrices: tokens vastly outnumber features here and the two forms are
mathematically identical for the linear kernel. Scores are clamped to [0, 1];
constant (degenerate) activations score 0 with a flag instead of erroring so
selection can proceed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import RowCountMismatch, TooFewRows
from .numerics import as_matrix, center_rows

DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class CkaScore:
    """Similarity score in [0, 1] plus sample count and degeneracy flag."""

    value: float
    n_rows: int
    degenerate: bool = False

    def __float__(self) -> float:
        return self.value


def linear_cka(x, y) -> CkaScore:
    """||Yc^T Xc||_F^2 / (||Xc^T Xc||_F * ||Yc^T Yc||_F) with column centering.

    Feature dims may differ; row counts must match (>= 2). Invariant to
    orthogonal transforms, isotropic scaling and constant row offsets.
    """
    x = as_matrix(x, "x")
    y = as_matrix(y, "y")
    if x.shape[0] != y.shape[0]:
        raise RowCountMismatch(f"linear_cka: {x.shape[0]} vs {y.shape[0]} rows")
    if x.shape[0] < 2:
        raise TooFewRows("linear_cka needs >= 2 rows")

    xc = center_rows(x)
    yc = center_rows(y)
    den_x = np.linalg.norm(xc.T @ xc)
    den_y = np.linalg.norm(yc.T @ yc)
    if den_x < DEGENERATE_NORM or den_y < DEGENERATE_NORM:
        return CkaScore(value=0.0, n_rows=x.shape[0], degenerate=True)

    num = np.linalg.norm(yc.T @ xc) ** 2
    value = float(np.clip(num / (den_x * den_y), 0.0, 1.0))
    return CkaScore(value=value, n_rows=x.shape[0])


def subsample_rows(x, max_rows: int, seed: int) -> np.ndarray:
    """Deterministic seeded row subset, order-preserving.

    The selected indices depend only on (row count, max_rows, seed), so
    calling with the same seed on a paired matrix of equal height picks the
    identical rows. Returns x unchanged when it already fits.
    """
    x = as_matrix(x, "x")
    if max_rows < 2:
        raise ValueError(f"max_rows must be >= 2, got {max_rows}")
    n = x.shape[0]
    if max_rows >= n:
        return x
    idx = subsample_indices(n, max_rows, seed)
    return x[idx]


def subsample_indices(n_rows: int, max_rows: int, seed: int) -> np.ndarray:
    """The sorted row indices subsample_rows would select."""
    rng = np.random.default_rng(seed)
    idx = rng.permutation(n_rows)[:max_rows]
    idx.sort()
    return idx
