"""Correlation matrices parameterized by the off-diagonal of their matrix logarithm."""
from __future__ import annotations

import numpy as np
from scipy.special import gammaln

from src.domain.errors import InputError, NumericalError
from src.services.correlation.base import CorrelationPrior

MAX_ITER = 200
TOLERANCE = 1e-12
FD_STEP = 1e-6
LOG_2PI = np.log(2.0 * np.pi)


def lower_indices(p: int) -> tuple[np.ndarray, np.ndarray]:
    """(rows, cols) of the strict lower triangle in column-major order."""
    cols, rows = np.triu_indices(p, 1)
    return rows, cols


def vecl(matrix: np.ndarray) -> np.ndarray:
    rows, cols = lower_indices(matrix.shape[0])
    return matrix[rows, cols]


def dim_from_pairs(m: int) -> int:
    p = int(round((1 + np.sqrt(1 + 8 * m)) / 2))
    if p * (p - 1) // 2 != m:
        raise InputError(f"{m} is not a valid number of correlation pairs")
    return p


def _expm_sym(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(a)
    return (v * np.exp(w)) @ v.T


def corr_from_v_with_iterations(v: np.ndarray) -> tuple[np.ndarray, int]:
    """Correlation matrix whose log has off-diagonal v, plus the iteration count.

    The diagonal d of the log is found by the fixed point
    d ← d − log diag(exp A(v, d)) started at d = 0.
    """
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise InputError("correlation vector v must be finite")
    p = dim_from_pairs(v.shape[0])
    if p == 1:
        return np.ones((1, 1)), 0

    rows, cols = lower_indices(p)
    a = np.zeros((p, p))
    a[rows, cols] = v
    a[cols, rows] = v

    d = np.zeros(p)
    for iteration in range(1, MAX_ITER + 1):
        np.fill_diagonal(a, d)
        step = np.log(np.diag(_expm_sym(a)))
        d = d - step
        if np.max(np.abs(step)) < TOLERANCE:
            break
    else:
        raise NumericalError(f"matrix-log recursion did not converge in {MAX_ITER} iterations for v={v.tolist()}")

    np.fill_diagonal(a, d)
    sigma = _expm_sym(a)
    scale = 1.0 / np.sqrt(np.diag(sigma))
    sigma = sigma * np.outer(scale, scale)
    sigma = 0.5 * (sigma + sigma.T)
    np.fill_diagonal(sigma, 1.0)
    return sigma, iteration


def corr_from_v(v: np.ndarray) -> np.ndarray:
    return corr_from_v_with_iterations(v)[0]


def v_from_corr(sigma: np.ndarray) -> np.ndarray:
    """vecl of the principal matrix logarithm of a correlation matrix."""
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise InputError(f"correlation matrix must be square, got {sigma.shape}")
    if not np.allclose(sigma, sigma.T, atol=1e-12) or not np.allclose(np.diag(sigma), 1.0, atol=1e-10):
        raise InputError("not a correlation matrix: needs symmetry and a unit diagonal")
    w, vecs = np.linalg.eigh(sigma)
    if not w[0] > 0:
        raise NumericalError(f"correlation matrix is not positive definite (min eigenvalue {w[0]:.3g})")
    return vecl((vecs * np.log(w)) @ vecs.T)


def v_jacobian(v: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """∂vecl(Σ)/∂v by central differences; column k is the derivative along v_k."""
    v = np.asarray(v, dtype=float)
    m = v.shape[0]
    jac = np.empty((m, m))
    for k in range(m):
        e = np.zeros(m)
        e[k] = step
        jac[:, k] = (vecl(corr_from_v(v + e)) - vecl(corr_from_v(v - e))) / (2.0 * step)
    return jac


class MatrixLogCorrelation(CorrelationPrior):
    """Prior 1: v ~ N(0, σ_v² I) with σ_v² ~ IG(a, b); block is (v, log σ_v²)."""

    kind = 1

    def __init__(self, p: int, shape: float = 0.001, scale: float = 0.001) -> None:
        super().__init__(p)
        self.m = p * (p - 1) // 2
        self.shape = shape
        self.scale = scale

    @property
    def size(self) -> int:
        return self.m + 1

    def sigma(self, block: np.ndarray) -> np.ndarray:
        return corr_from_v(block[: self.m])

    def log_prior(self, block: np.ndarray) -> tuple[float, np.ndarray]:
        v, omega = block[: self.m], float(block[self.m])
        a, b = self.shape, self.scale
        sq = float(v @ v)
        inv_var = np.exp(-omega)

        value = -0.5 * self.m * (LOG_2PI + omega) - 0.5 * sq * inv_var
        # IG(a, b) on σ_v² with the log-scale Jacobian
        value += a * np.log(b) - gammaln(a) - (a + 1.0) * omega - b * inv_var + omega

        grad = np.empty(self.size)
        grad[: self.m] = -v * inv_var
        grad[self.m] = -0.5 * self.m + 0.5 * sq * inv_var - a + b * inv_var
        return float(value), grad

    def pullback(self, block: np.ndarray, dsigma: np.ndarray) -> np.ndarray:
        grad = np.zeros(self.size)
        if self.m:
            grad[: self.m] = v_jacobian(block[: self.m]).T @ (2.0 * vecl(dsigma))
        return grad
