from __future__ import annotations

import logging
from abc import ABC, abstractmethod

import numpy as np

from src.domain.errors import NumericalError
from src.metrics.metrics import count_eigenvalue_clamps

logger = logging.getLogger(__name__)

EIGEN_FLOOR = 1e-10
MAX_CONDITION = 1e12


def invert_correlation(sigma: np.ndarray) -> tuple[np.ndarray, float]:
    """Inverse and log-determinant of a correlation matrix via its eigendecomposition.

    Raises:
        NumericalError: Σ is not positive definite or its condition number exceeds 1e12

    """
    eigvals, eigvecs = np.linalg.eigh(sigma)
    low, high = eigvals[0], eigvals[-1]
    if not low > 0 or high / low > MAX_CONDITION:
        raise NumericalError(f"correlation matrix is numerically singular, eigenvalues in [{low:.3g}, {high:.3g}]")

    clamped = int(np.sum(eigvals < EIGEN_FLOOR))
    if clamped:
        logger.warning("Clamped %d correlation eigenvalues at %g", clamped, EIGEN_FLOOR)
        count_eigenvalue_clamps(clamped)
        eigvals = np.maximum(eigvals, EIGEN_FLOOR)

    omega = (eigvecs / eigvals) @ eigvecs.T
    return 0.5 * (omega + omega.T), float(np.sum(np.log(eigvals)))


class CorrelationPrior(ABC):
    """Parameterization of Σ by an unconstrained block, with its prior.

    `pullback` maps a gradient with respect to Σ (entries treated as free,
    so that df = Σ_jl A_jl dΣ_jl) to the gradient with respect to the block.
    """

    kind: int

    def __init__(self, p: int) -> None:
        self.p = p

    @property
    @abstractmethod
    def size(self) -> int:
        ...

    @abstractmethod
    def sigma(self, block: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def log_prior(self, block: np.ndarray) -> tuple[float, np.ndarray]:
        ...

    @abstractmethod
    def pullback(self, block: np.ndarray, dsigma: np.ndarray) -> np.ndarray:
        ...

    def initial(self) -> np.ndarray:
        """Block that decodes to Σ = I."""
        return np.zeros(self.size)
