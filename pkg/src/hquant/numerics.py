"""Minimal dense linear algebra shared by every other module.

Matrices are plain float64 numpy arrays, always 2-D, validated finite at the
boundaries via :func:`as_matrix`. Internals run in float64 throughout; weights
live on disk as float32 and are widened on load. Backed by numpy/scipy BLAS;
no sparse or blocked formats (desk-scale dims make dense fine).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, NotPositiveDefinite, TooFewRows

# Cholesky damping ladder: start at `damping`, multiply by 10 up to 3 retries.
DAMPING_RETRIES = 3
DAMPING_GROWTH = 10.0
DEFAULT_DAMPING = 0.01


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return `a` as a C-contiguous float64 2-D array.

    Raises DimensionMismatch for non-2-D input and ValueError for any
    NaN/Inf entry; zero-size dimensions are rejected.
    """
    out = np.ascontiguousarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got ndim={out.ndim}")
    if out.shape[0] == 0 or out.shape[1] == 0:
        raise DimensionMismatch(f"{name} must be non-empty, got shape {out.shape}")
    if not np.isfinite(out).all():
        raise ValueError(f"{name} contains non-finite entries")
    return out


def matmul(a, b) -> np.ndarray:
    """Standard matrix product with explicit shape checking."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionMismatch(f"matmul: {a.shape} x {b.shape}")
    return a @ b


def center_rows(x) -> np.ndarray:
    """Subtract each column's mean, i.e. apply H = I - (1/n)11^T from the left.

    The centering matrix is never materialized; needs n >= 2 rows.
    """
    x = as_matrix(x, "x")
    if x.shape[0] < 2:
        raise TooFewRows(f"center_rows needs >= 2 rows, got {x.shape[0]}")
    return x - x.mean(axis=0, keepdims=True)


def solve_spd(a, b, damping: float = 0.0) -> np.ndarray:
    """Solve (a + damping*mean(diag(a))*I) x = b via Cholesky.

    `a` must be square symmetric. On factorization failure the effective
    damping is grown 10x up to 3 retries before giving up with
    NotPositiveDefinite.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"solve_spd: a must be square, got {a.shape}")
    if a.shape[0] != b.shape[0]:
        raise DimensionMismatch(f"solve_spd: a {a.shape} vs b {b.shape}")
    if damping < 0:
        raise ValueError("damping must be >= 0")

    mean_diag = float(np.mean(np.diag(a)))
    lam = damping * mean_diag
    for attempt in range(DAMPING_RETRIES + 1):
        try:
            cho = scipy.linalg.cho_factor(
                a + lam * np.eye(a.shape[0]) if lam > 0 else a,
                lower=True, check_finite=False,
            )
            return scipy.linalg.cho_solve(cho, b, check_finite=False)
        except scipy.linalg.LinAlgError:
            if attempt == DAMPING_RETRIES:
                break
            # escalate from zero or grow the existing damping
            if lam <= 0:
                lam = DEFAULT_DAMPING * max(mean_diag, 1e-12)
            else:
                lam *= DAMPING_GROWTH
    raise NotPositiveDefinite(
        f"Cholesky failed after {DAMPING_RETRIES} damping retries (lam={lam:.3e})"
    )


@dataclass
class LeastSquaresResult:
    """Solution of min_M ||x_fp - x_q M||_F^2 plus solve diagnostics."""

    m: np.ndarray
    rank_deficient: bool
    damping_used: float


def least_squares(x_q, x_fp) -> LeastSquaresResult:
    """Fit M minimizing ||x_fp - x_q M||_F^2 via damped normal equations.

    Needs x_q.rows == x_fp.rows and at least as many rows as x_q columns.
    When the feature dims match (so M = I is feasible) the returned M is
    guaranteed not to be worse than the identity: the solve is compared
    against it and the better candidate wins. Rank deficiency is handled by
    the damping ladder and reported in the result rather than raised.
    """
    x_q = as_matrix(x_q, "x_q")
    x_fp = as_matrix(x_fp, "x_fp")
    if x_q.shape[0] != x_fp.shape[0]:
        raise DimensionMismatch(f"least_squares: rows {x_q.shape[0]} vs {x_fp.shape[0]}")
    if x_q.shape[0] < x_q.shape[1]:
        raise DimensionMismatch(
            f"least_squares: underdetermined ({x_q.shape[0]} rows < {x_q.shape[1]} cols)"
        )

    gram = x_q.T @ x_q
    rhs = x_q.T @ x_fp
    mean_diag = float(np.mean(np.diag(gram)))

    m = None
    rank_deficient = False
    lam = 0.0
    for attempt in range(DAMPING_RETRIES + 2):
        try:
            cho = scipy.linalg.cho_factor(
                gram + lam * np.eye(gram.shape[0]) if lam > 0 else gram,
                lower=True, check_finite=False,
            )
            m = scipy.linalg.cho_solve(cho, rhs, check_finite=False)
            if np.isfinite(m).all():
                break
            m = None
            raise scipy.linalg.LinAlgError("non-finite solution")
        except scipy.linalg.LinAlgError:
            rank_deficient = True
            lam = DEFAULT_DAMPING * max(mean_diag, 1e-12) if lam <= 0 else lam * DAMPING_GROWTH
    if m is None:
        raise NotPositiveDefinite("least_squares: normal equations unsolvable")

    if x_q.shape[1] == x_fp.shape[1]:
        # identity is feasible; never return anything worse
        res_m = np.linalg.norm(x_fp - x_q @ m)
        res_eye = np.linalg.norm(x_fp - x_q)
        if res_eye < res_m:
            m = np.eye(x_q.shape[1])
    return LeastSquaresResult(m=m, rank_deficient=rank_deficient, damping_used=lam)


def frobenius(x) -> float:
    """Frobenius norm."""
    return float(np.linalg.norm(np.asarray(x, dtype=np.float64)))
