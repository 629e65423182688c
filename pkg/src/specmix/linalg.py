"""Dense linear algebra with safeguarded Cholesky factorization.

Matrices are plain numpy float64 arrays in row-major order. The factorization
escalates a diagonal jitter until it succeeds, which keeps kernel matrices
invertible when inputs (or inducing points) nearly coincide.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionMismatch, NonFinite, NotPositiveDefinite

# Escalation stops once the jitter would exceed this fraction of the mean
# diagonal; beyond that the matrix is treated as genuinely indefinite.
JITTER_CAP_FRACTION = 1e-2
DEFAULT_JITTER_FRACTION = 1e-6


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular factor of ``a + jitter_used * I``."""

    lower: np.ndarray
    jitter_used: float

    @property
    def side(self):
        return self.lower.shape[0]


def cholesky(a, base_jitter=None):
    """Factor a symmetric PSD matrix, escalating jitter by 10x on failure.

    ``base_jitter=None`` uses ``1e-6 * mean(diag(a))``. Raises
    ``NotPositiveDefinite`` when the cap ``1e-2 * mean(diag(a))`` is reached,
    ``NonFinite`` on NaN/Inf input.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise NonFinite("cholesky input contains NaN or Inf")
    asym = np.abs(a - a.T).max(initial=0.0)
    if asym > 1e-10 * max(1.0, np.abs(a).max(initial=0.0)):
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3e})")

    n = a.shape[0]
    mean_diag = float(np.trace(a)) / n if n else 0.0
    scale = mean_diag if mean_diag > 0 else 1.0
    if base_jitter is None:
        base_jitter = DEFAULT_JITTER_FRACTION * scale
    cap = max(JITTER_CAP_FRACTION * scale, float(base_jitter))

    jitter = float(base_jitter)
    while True:
        try:
            shifted = a if jitter == 0.0 else a + jitter * np.eye(n)
            lower = np.linalg.cholesky(shifted)
            return CholeskyFactor(lower=lower, jitter_used=jitter)
        except np.linalg.LinAlgError:
            nxt = DEFAULT_JITTER_FRACTION * scale if jitter == 0.0 else jitter * 10.0
            if nxt > cap:
                raise NotPositiveDefinite(
                    f"factorization failed at maximum jitter {jitter:.3e}"
                ) from None
            jitter = nxt


def tri_solve(factor, b):
    """Solve ``(L L^T) x = b`` given a CholeskyFactor."""
    b = np.asarray(b, dtype=float)
    rows = b.shape[0]
    if rows != factor.side:
        raise DimensionMismatch(
            f"factor side {factor.side} does not match rhs rows {rows}"
        )
    half = solve_triangular(factor.lower, b, lower=True)
    return solve_triangular(factor.lower.T, half, lower=False)


def log_det(factor):
    """Log-determinant of the factored matrix: ``2 * sum(log(diag(L)))``."""
    return 2.0 * float(np.sum(np.log(np.diag(factor.lower))))


def solve_lower(lower, b):
    """Solve ``L x = b`` with L lower triangular."""
    return solve_triangular(lower, b, lower=True)


def solve_upper(upper, b):
    """Solve ``U x = b`` with U upper triangular."""
    return solve_triangular(upper, b, lower=False)
