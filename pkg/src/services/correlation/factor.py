"""Correlation matrices from K factor loadings with generalized double Pareto priors."""
from __future__ import annotations

import numpy as np

from src.domain.errors import InputError
from src.services.correlation.base import CorrelationPrior


def gdp_logpdf(g: np.ndarray | float, shape: float = 3.0, scale: float = 1.0) -> np.ndarray:
    """log GDP(a, b) density: log(a/(2b)) − (a+1)·log(1 + |g|/b)."""
    return np.log(shape / (2.0 * scale)) - (shape + 1.0) * np.log1p(np.abs(g) / scale)


def corr_from_factors(loadings: np.ndarray) -> np.ndarray:
    """Σ = diag(Υ)^(-1/2) Υ diag(Υ)^(-1/2) with Υ = GGᵀ + I."""
    g = np.asarray(loadings, dtype=float)
    if g.ndim != 2:
        raise InputError(f"factor loadings must be a p x K matrix, got shape {g.shape}")
    upsilon = g @ g.T + np.eye(g.shape[0])
    scale = 1.0 / np.sqrt(np.diag(upsilon))
    sigma = upsilon * np.outer(scale, scale)
    np.fill_diagonal(sigma, 1.0)
    return sigma


class FactorCorrelation(CorrelationPrior):
    """Prior 2: G lower trapezoidal with positive diagonal, GDP prior on every free entry.

    Block layout: strictly lower entries column by column, then log g_11..log g_KK.
    """

    kind = 2

    def __init__(self, p: int, factors: int = 1, shape: float = 3.0, scale: float = 1.0) -> None:
        super().__init__(p)
        if not 1 <= factors <= p:
            raise InputError(f"factor count K={factors} must lie in 1..p={p}")
        self.factors = factors
        self.shape = shape
        self.scale = scale
        entries = [(i, j) for j in range(factors) for i in range(j + 1, p)]
        self._rows = np.array([i for i, _ in entries], dtype=int)
        self._cols = np.array([j for _, j in entries], dtype=int)
        self._diag = np.arange(factors)

    @property
    def size(self) -> int:
        return self._rows.shape[0] + self.factors

    def loadings(self, block: np.ndarray) -> np.ndarray:
        n_strict = self._rows.shape[0]
        g = np.zeros((self.p, self.factors))
        g[self._rows, self._cols] = block[:n_strict]
        g[self._diag, self._diag] = np.exp(block[n_strict:])
        return g

    def sigma(self, block: np.ndarray) -> np.ndarray:
        return corr_from_factors(self.loadings(block))

    def log_prior(self, block: np.ndarray) -> tuple[float, np.ndarray]:
        n_strict = self._rows.shape[0]
        strict, log_diag = block[:n_strict], block[n_strict:]
        diag = np.exp(log_diag)
        a, b = self.shape, self.scale

        value = np.sum(gdp_logpdf(strict, a, b)) + np.sum(gdp_logpdf(diag, a, b) + log_diag)
        grad = np.concatenate(
            [
                -(a + 1.0) * np.sign(strict) / (b + np.abs(strict)),
                -(a + 1.0) * diag / (b + diag) + 1.0,
            ],
        )
        return float(value), grad

    def pullback(self, block: np.ndarray, dsigma: np.ndarray) -> np.ndarray:
        g = self.loadings(block)
        upsilon = g @ g.T + np.eye(self.p)
        d = np.diag(upsilon)
        inv_sqrt = 1.0 / np.sqrt(d)
        sigma = upsilon * np.outer(inv_sqrt, inv_sqrt)

        # df = tr(W dΥ) with the diagonal normalization folded in
        w = dsigma * np.outer(inv_sqrt, inv_sqrt)
        w[np.diag_indices(self.p)] -= np.diag(sigma @ dsigma) / d
        dg = 2.0 * w @ g

        return np.concatenate([dg[self._rows, self._cols], dg[self._diag, self._diag] * g[self._diag, self._diag]])
