"""NOC benchmark: Gaussian copula with regression margins.

Each response gets a ridge regression mean on the design F; the residuals get
a KDE margin and a constant Gaussian copula correlation ties them together.
"""
from __future__ import annotations

import logging

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.stats import norm

from src.domain.dto import BasisSpec
from src.domain.errors import InputError, NumericalError
from src.domain.types import BasisDescriptor
from src.services.basis_service import build_design, design_rows, standardize
from src.services.margins.kde_margin import KdeMargin

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


class NocForecaster:
    """Gaussian copula with covariate-dependent marginal means and constant correlation."""

    def __init__(self, ridge: float = 1.0, gauss_hermite_order: int = 64) -> None:
        self.ridge = ridge
        self.gauss_hermite_order = gauss_hermite_order
        self.basis: BasisDescriptor | None = None
        self.coef: np.ndarray | None = None
        self.margins: list[KdeMargin] = []
        self.corr: np.ndarray | None = None
        self._chol: np.ndarray | None = None
        self._residual_means: np.ndarray | None = None

    def fit(self, Y: np.ndarray, X: np.ndarray, basis_spec: BasisSpec) -> NocForecaster:
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        design = build_design(standardize(X), basis_spec)
        F = design.matrix
        self.basis = design.descriptor

        gram = F.T @ F + self.ridge * np.eye(F.shape[1])
        self.coef = np.linalg.solve(gram, F.T @ Y)
        residuals = Y - F @ self.coef

        self.margins = [KdeMargin.fit(residuals[:, j]) for j in range(Y.shape[1])]
        z = np.column_stack([m.to_z(residuals[:, j]) for j, m in enumerate(self.margins)])
        corr = np.atleast_2d(np.corrcoef(z, rowvar=False))
        try:
            self._chol = np.linalg.cholesky(corr)
        except np.linalg.LinAlgError as e:
            raise NumericalError("NOC residual correlation is not positive definite") from e
        self.corr = corr

        nodes, weights = hermgauss(self.gauss_hermite_order)
        self._residual_means = np.array(
            [weights @ m.from_z(np.sqrt(2.0) * nodes) / np.sqrt(np.pi) for m in self.margins],
        )
        logger.info("Fitted NOC benchmark on %d rows, q=%d", Y.shape[0], F.shape[1])
        return self

    def _location(self, x: np.ndarray) -> np.ndarray:
        if self.basis is None:
            raise InputError("NOC forecaster is not fitted")
        return design_rows(np.atleast_2d(x), self.basis)[0] @ self.coef

    def log_density(self, x: np.ndarray, y: np.ndarray) -> float:
        e = np.asarray(y, dtype=float) - self._location(x)
        z = np.array([m.to_z(e[j]) for j, m in enumerate(self.margins)])
        r = np.linalg.solve(self._chol, z)
        log_copula = -0.5 * (r @ r) - np.sum(np.log(np.diag(self._chol))) + 0.5 * float(z @ z)
        with np.errstate(divide="ignore"):
            log_margins = sum(float(np.log(m.pdf(e[j]))) for j, m in enumerate(self.margins))
        return float(log_copula + log_margins)

    def sample(self, x: np.ndarray, m: int, seed: int | None = 0) -> np.ndarray:
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((m, len(self.margins))) @ self._chol.T
        e = np.column_stack([mg.from_z(z[:, j]) for j, mg in enumerate(self.margins)])
        return self._location(x) + e

    def mean(self, x: np.ndarray) -> np.ndarray:
        return self._location(x) + self._residual_means
