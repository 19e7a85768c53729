"""Plug-in predictive densities, samplers, marginal means and Spearman maps of a fitted copula."""
from __future__ import annotations

import logging

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.linalg import cho_factor, solve_triangular
from scipy.stats import norm

from src.domain.errors import InputError
from src.domain.types import FittedModel, PredictiveBatch
from src.services.basis_service import design_row
from src.services.copula_model import make_correlation
from src.services.vi_service import sample_eta

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
MIN_CALIBRATION_CASES = 50


def spearman_from_pearson(r: np.ndarray | float) -> np.ndarray:
    """Spearman correlation of a bivariate normal with Pearson correlation r."""
    return 6.0 / np.pi * np.arcsin(np.asarray(r, dtype=float) / 2.0)


def _gaussian_logpdf(z: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    chol, _ = cho_factor(cov, lower=True)
    chol = np.tril(chol)
    r = solve_triangular(chol, z - mean, lower=True)
    return float(-0.5 * (r @ r) - np.sum(np.log(np.diag(chol))) - 0.5 * z.shape[0] * LOG_2PI)


class PlugInState:
    """β̂, log ξ̂ and Σ̂ decoded from one value of the augmented state."""

    def __init__(self, model: FittedModel, eta: np.ndarray) -> None:
        state = model.layout.unpack(eta)
        self.beta = state.beta
        self.log_xi = state.log_xi
        self.xi = np.exp(state.log_xi)
        self.sigma = make_correlation(model.layout.p, model.prior).sigma(state.corr)

    def location_scale(self, row: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Mean s_j·x̃ᵀβ_j and scale s_j of the normal scores at design row x̃."""
        s = 1.0 / np.sqrt(1.0 + (self.xi * self.xi) @ (row * row))
        return s * (self.beta @ row), s


class PredictService:
    """Prediction at new covariate values for one fitted model.

    Args:
        model (FittedModel): fitted copula with margins and basis
        gauss_hermite_order (int): nodes used for marginal means

    """

    def __init__(self, model: FittedModel, gauss_hermite_order: int = 64) -> None:
        self.model = model
        self.plugin = PlugInState(model, model.params.mu)
        self.gauss_hermite_order = gauss_hermite_order

    @property
    def p(self) -> int:
        return self.model.p

    def design_row(self, x_new: np.ndarray) -> np.ndarray:
        return design_row(x_new, self.model.basis)

    def pseudo_mean(self, x_new: np.ndarray, j: int | None = None) -> np.ndarray | float:
        """m_j(x) = s_j·x̃ᵀβ̂_j, all j when `j` is omitted."""
        m, _ = self.plugin.location_scale(self.design_row(x_new))
        return m if j is None else float(m[self._check_j(j)])

    def _check_j(self, j: int) -> int:
        if not 0 <= j < self.p:
            raise InputError(f"response index {j} outside 0..{self.p - 1}")
        return j

    def _scores(self, y_new: np.ndarray) -> tuple[np.ndarray, float]:
        """Normal scores and Σ_j log g_j(y_j) − log φ(z_j)."""
        y_new = np.asarray(y_new, dtype=float)
        if y_new.shape != (self.p,):
            raise InputError(f"response vector has shape {y_new.shape}, expected ({self.p},)")
        z = np.empty(self.p)
        log_jacobian = 0.0
        for j, margin in enumerate(self.model.margins):
            margin.check_support(y_new[j], name=self.model.response_names[j])
            z[j] = margin.to_z(y_new[j])
            log_jacobian += float(margin.logpdf(y_new[j])) - float(norm.logpdf(z[j]))
        return z, log_jacobian

    def _log_density_at(self, state: PlugInState, row: np.ndarray, z: np.ndarray, log_jacobian: float) -> float:
        mean, s = state.location_scale(row)
        return _gaussian_logpdf(z, mean, state.sigma * np.outer(s, s)) + log_jacobian

    def log_predictive_density(
            self,
            x_new: np.ndarray,
            y_new: np.ndarray,
            mode: str = "plugin",
            mc_draws: int = 200,
            seed: int | None = 0) -> float:
        """log p(y_new | x_new) with the plug-in estimate, or averaged over variational draws.

        Raises:
            InputError: y_new outside the margin supports or wrong dimensions

        """
        row = self.design_row(x_new)
        z, log_jacobian = self._scores(y_new)
        if mode == "plugin":
            return self._log_density_at(self.plugin, row, z, log_jacobian)
        if mode != "mc":
            raise InputError(f"unknown prediction mode '{mode}'")

        params = self.model.params
        rng = np.random.default_rng(seed)
        logs = np.empty(mc_draws)
        for r in range(mc_draws):
            eta = sample_eta(params, rng.standard_normal(params.factors), rng.standard_normal(params.dim))
            logs[r] = self._log_density_at(PlugInState(self.model, eta), row, z, log_jacobian)
        top = logs.max()
        return float(top + np.log(np.mean(np.exp(logs - top))))

    def predictive_density(self, x_new: np.ndarray, y_new: np.ndarray, **kwargs) -> float:
        return float(np.exp(self.log_predictive_density(x_new, y_new, **kwargs)))

    def marginal_predictive_density(self, x_new: np.ndarray, j: int, y: np.ndarray) -> np.ndarray:
        """Plug-in density of Y_j alone, g_j(y)·φ(z; m_j, s_j²)/φ(z)."""
        j = self._check_j(j)
        mean, s = self.plugin.location_scale(self.design_row(x_new))
        margin = self.model.margins[j]
        y = np.asarray(y, dtype=float)
        inside = margin.in_support(y)
        z = margin.to_z(np.where(inside, y, margin.lower if np.isfinite(margin.lower) else 0.0))
        with np.errstate(divide="ignore"):
            log_dens = margin.logpdf(y) + norm.logpdf(z, mean[j], s[j]) - norm.logpdf(z)
        return np.where(inside, np.exp(log_dens), 0.0)

    def predictive_sample(self, x_new: np.ndarray, m: int, seed: int | None = 0) -> PredictiveBatch:
        """m joint draws of Y at x_new: z ~ N(S x̃β̂, SΣ̂S), y_j = G_j⁻¹(Φ(z_j))."""
        if m < 1:
            raise InputError(f"sample count must be positive, got {m}")
        x_new = np.asarray(x_new, dtype=float)
        mean, s = self.plugin.location_scale(self.design_row(x_new))
        chol = np.linalg.cholesky(self.plugin.sigma * np.outer(s, s))

        rng = np.random.default_rng(seed)
        z = mean + rng.standard_normal((m, self.p)) @ chol.T
        y = np.column_stack([margin.from_z(z[:, j]) for j, margin in enumerate(self.model.margins)])
        return PredictiveBatch(samples=y, x_new=x_new.copy(), seed=seed)

    def marginal_mean(self, x_new: np.ndarray, j: int) -> float:
        """E(Y_j | x) by Gauss–Hermite quadrature of G_j⁻¹(Φ(z)) against N(m_j, s_j²)."""
        j = self._check_j(j)
        mean, s = self.plugin.location_scale(self.design_row(x_new))
        nodes, weights = hermgauss(self.gauss_hermite_order)
        values = self.model.margins[j].from_z(mean[j] + np.sqrt(2.0) * s[j] * nodes)
        return float(weights @ values / np.sqrt(np.pi))

    def marginal_means(self, x_new: np.ndarray) -> np.ndarray:
        return np.array([self.marginal_mean(x_new, j) for j in range(self.p)])

    def spearman_matrix(self, x_ref: np.ndarray, kind: str = "copula") -> np.ndarray:
        """p x p Spearman correlations at x_ref.

        `copula` maps R = S V S with V = Σ̂ + (I⊗x̃)(Σ̂⋆P̂⁻¹)(I⊗x̃ᵀ); `predictive`
        maps the correlation of the plug-in predictive scores, which is Σ̂.
        """
        sigma = self.plugin.sigma
        if kind == "predictive":
            r = sigma
        elif kind == "copula":
            row = self.design_row(x_ref)
            scaled = self.plugin.xi * row[None, :]
            v = sigma * (1.0 + scaled @ scaled.T)
            d = 1.0 / np.sqrt(np.diag(v))
            r = v * np.outer(d, d)
        else:
            raise InputError(f"unknown spearman kind '{kind}'")

        gamma = np.clip(spearman_from_pearson(r), -1.0, 1.0)
        gamma = 0.5 * (gamma + gamma.T)
        np.fill_diagonal(gamma, 1.0)
        return gamma

    def linear_functional_sample(
            self,
            x_new: np.ndarray,
            weights: np.ndarray,
            m: int,
            seed: int | None = 0) -> np.ndarray:
        """m draws of wᵀY at x_new."""
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (self.p,) or not np.all(np.isfinite(weights)):
            raise InputError(f"weights must be {self.p} finite values")
        return self.predictive_sample(x_new, m, seed).samples @ weights


def empirical_cdf_matrix(samples: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """cases x grid matrix of sample-based predictive CDFs."""
    samples = np.sort(np.atleast_2d(np.asarray(samples, dtype=float)), axis=1)
    grid = np.asarray(grid, dtype=float)
    counts = np.stack([np.searchsorted(row, grid, side="right") for row in samples])
    return counts / samples.shape[1]


def calibration_curve(predictive_cdfs: np.ndarray, reference_cdf: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Average predictive CDF over test cases next to the reference CDF on the same grid."""
    predictive_cdfs = np.atleast_2d(np.asarray(predictive_cdfs, dtype=float))
    reference_cdf = np.asarray(reference_cdf, dtype=float)
    if predictive_cdfs.shape[0] == 0 or predictive_cdfs.size == 0:
        raise InputError("calibration needs at least one test case")
    if predictive_cdfs.shape[1] != reference_cdf.shape[0]:
        raise InputError("predictive CDFs and reference CDF use different grids")
    if predictive_cdfs.shape[0] < MIN_CALIBRATION_CASES:
        logger.warning("Calibration on %d test cases, at least %d recommended", predictive_cdfs.shape[0], MIN_CALIBRATION_CASES)
    return predictive_cdfs.mean(axis=0), reference_cdf


def calibration_distance(predictive_cdfs: np.ndarray, reference_cdf: np.ndarray) -> float:
    """sup_y |mean_i F_i(y) − G(y)| over the grid."""
    average, reference = calibration_curve(predictive_cdfs, reference_cdf)
    return float(np.max(np.abs(average - reference)))
