"""Implicit Gaussian copula of a horseshoe-regularized SUR.

The augmented posterior log h(η) and its gradient are evaluated in
O(np(p+q) + p³) without forming any np x np matrix.
"""
from __future__ import annotations

import logging

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from src.domain.dto import PriorSpec
from src.domain.errors import InputError, NumericalError
from src.domain.types import CopulaLayout, UnpackedState
from src.services.correlation.base import CorrelationPrior, invert_correlation
from src.services.correlation.factor import FactorCorrelation
from src.services.correlation.matrix_log import MatrixLogCorrelation

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
LOG_2_OVER_PI = np.log(2.0 / np.pi)


def star_product(sigma: np.ndarray, blocks: list[np.ndarray]) -> np.ndarray:
    """Σ ⋆ D: the pq x pq matrix with blocks σ_jl U_jᵀU_l, U_j the upper Cholesky factor of D_j."""
    sigma = np.asarray(sigma, dtype=float)
    p = sigma.shape[0]
    if len(blocks) != p:
        raise InputError(f"star product needs {p} blocks, got {len(blocks)}")
    try:
        np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as e:
        raise NumericalError("Σ is not positive definite") from e

    factors = []
    for j, block in enumerate(blocks):
        try:
            factors.append(np.linalg.cholesky(np.asarray(block, dtype=float)).T)
        except np.linalg.LinAlgError as e:
            raise NumericalError(f"block D_{j + 1} is not positive definite") from e

    q = factors[0].shape[0]
    out = np.empty((p * q, p * q))
    for j in range(p):
        for l in range(p):
            out[j * q:(j + 1) * q, l * q:(l + 1) * q] = sigma[j, l] * factors[j].T @ factors[l]
    return out


def horseshoe_precision_inv(log_xi: np.ndarray) -> np.ndarray:
    """Diagonal of P_j(θ_j)⁻¹, i.e. ξ²."""
    return np.exp(2.0 * np.asarray(log_xi, dtype=float))


def scale_factor(x: np.ndarray, log_xi: np.ndarray) -> float:
    """s = (1 + xᵀP⁻¹x)^(-1/2) for one design row and one equation."""
    x = np.asarray(x, dtype=float)
    return float((1.0 + np.sum(x * x * horseshoe_precision_inv(log_xi))) ** -0.5)


def scale_factors(F: np.ndarray, log_xi: np.ndarray) -> np.ndarray:
    """n x p matrix of s_ij for all design rows and equations (log_xi is p x q)."""
    a = (np.asarray(F, dtype=float) ** 2) @ horseshoe_precision_inv(log_xi).T
    return 1.0 / np.sqrt(1.0 + a)


def log_half_cauchy(x: np.ndarray | float, scale: np.ndarray | float = 1.0) -> np.ndarray:
    """log of 2/(πτ(1 + x²/τ²)) for x ≥ 0."""
    x = np.asarray(x, dtype=float)
    return LOG_2_OVER_PI - np.log(scale) - np.log1p((x / scale) ** 2)


def horseshoe_log_prior(log_xi: np.ndarray, log_tau: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Half-Cauchy local and global scales on the log scale, Jacobians included."""
    r = 2.0 * (log_xi - log_tau[:, None])
    local = LOG_2_OVER_PI - log_tau[:, None] - np.logaddexp(0.0, r) + log_xi
    glob = LOG_2_OVER_PI - np.logaddexp(0.0, 2.0 * log_tau) + log_tau
    value = float(np.sum(local) + np.sum(glob))

    share = expit(r)
    grad_xi = 1.0 - 2.0 * share
    grad_tau = np.sum(2.0 * share - 1.0, axis=1) + 1.0 - 2.0 * expit(2.0 * log_tau)
    return value, grad_xi, grad_tau


def make_correlation(p: int, prior: PriorSpec) -> CorrelationPrior:
    if prior.kind == 1:
        return MatrixLogCorrelation(p, prior.sigma_v_shape, prior.sigma_v_scale)
    return FactorCorrelation(p, prior.factors, prior.gdp_shape, prior.gdp_scale)


class CopulaPosterior:
    """Augmented posterior h(η) of the copula model for fixed normal scores z and design F.

    Args:
        z (np.ndarray): n x p normal scores Φ⁻¹(G_j(y_ij))
        F (np.ndarray): n x q design matrix
        prior (PriorSpec): correlation prior choice and hyperparameters

    """

    def __init__(self, z: np.ndarray, F: np.ndarray, prior: PriorSpec | None = None) -> None:
        z = np.asarray(z, dtype=float)
        F = np.asarray(F, dtype=float)
        if z.ndim != 2 or F.ndim != 2 or z.shape[0] != F.shape[0]:
            raise InputError(f"scores {z.shape} and design {F.shape} do not match")
        if not np.all(np.isfinite(z)) or not np.all(np.isfinite(F)):
            raise InputError("scores and design must be finite")

        self.prior = prior or PriorSpec()
        self.z = z
        self.F = F
        self._F2 = F * F
        self.n, self.p = z.shape
        self.q = F.shape[1]
        self.layout = CopulaLayout(self.p, self.q, self.prior.kind, self.prior.factors)
        self.correlation = make_correlation(self.p, self.prior)

    @property
    def dim(self) -> int:
        return self.layout.dim

    def unpack(self, eta: np.ndarray) -> UnpackedState:
        return self.layout.unpack(eta)

    def sigma(self, eta: np.ndarray) -> np.ndarray:
        return self.correlation.sigma(self.unpack(eta).corr)

    def initial_log_scale(self) -> float:
        """Common log ξ that makes the average ξ²‖f_i‖² equal to one."""
        return float(-0.5 * np.log(max(np.mean(np.sum(self._F2, axis=1)), 1e-12)))

    def initial_mean(self, ridge: float = 1.0) -> np.ndarray:
        """Start with all log ξ and log τ at `initial_log_scale` and β from a ridge fit of z/s.

        The ridge penalty ridge/ξ² matches the prior β_j ~ N(0, ξ²I) at the
        starting scales; Σ starts at the identity.
        """
        level = self.initial_log_scale()
        log_xi = np.full((self.p, self.q), level)
        pseudo = self.z / scale_factors(self.F, log_xi)
        gram = self.F.T @ self.F + ridge * np.exp(-2.0 * level) * np.eye(self.q)
        beta = np.linalg.solve(gram, self.F.T @ pseudo).T
        return self.layout.pack(beta, log_xi, np.full(self.p, level), self.correlation.initial())

    def find_mode(
            self,
            start: np.ndarray,
            max_iter: int = 2000,
            scale_bounds: tuple[float, float] = (-8.0, 6.0)) -> np.ndarray:
        """Climb log h from `start` with L-BFGS-B, log ξ and log τ boxed to `scale_bounds`.

        log h is unbounded along the horseshoe funnel (β → 0, τ → 0), so only
        a boxed maximum exists. The start is returned unchanged when the
        optimizer ends lower or at a non-finite value.
        """
        hs = self.layout.horseshoe_slice
        lower, upper = scale_bounds
        x0 = np.asarray(start, dtype=float).copy()
        x0[hs] = np.clip(x0[hs], lower, upper)
        bounds = [(None, None)] * self.dim
        bounds[hs] = [(lower, upper)] * (hs.stop - hs.start)

        def objective(eta: np.ndarray) -> tuple[float, np.ndarray]:
            try:
                value, grad = self.value_and_grad(eta)
            except NumericalError:
                return np.inf, np.zeros_like(eta)
            if not np.isfinite(value) or not np.all(np.isfinite(grad)):
                return np.inf, np.zeros_like(eta)
            return -value, -grad

        before = -objective(x0)[0]
        result = minimize(objective, x0, jac=True, method="L-BFGS-B", bounds=bounds, options={"maxiter": max_iter})
        after = -objective(result.x)[0]
        if not np.isfinite(after) or after < before:
            logger.warning("Mode search ended at log h %s below the start %s, keeping the start", after, before)
            return x0
        logger.info("Mode search: log h %.2f -> %.2f in %d iterations (%s)", before, after, result.nit, result.message)
        return result.x

    def log_h(self, eta: np.ndarray) -> float:
        return self.value_and_grad(eta, with_grad=False)[0]

    def grad_log_h(self, eta: np.ndarray) -> np.ndarray:
        return self.value_and_grad(eta)[1]

    def value_and_grad(self, eta: np.ndarray, with_grad: bool = True) -> tuple[float, np.ndarray | None]:
        """log h(η) and, optionally, its gradient in the layout of η."""
        st = self.unpack(eta)
        n, p, q = self.n, self.p, self.q

        sigma = self.correlation.sigma(st.corr)
        omega, logdet = invert_correlation(sigma)

        xi2 = np.exp(2.0 * st.log_xi)
        xi = np.exp(st.log_xi)
        a = self._F2 @ xi2.T
        s = 1.0 / np.sqrt(1.0 + a)

        # Gaussian term of the pseudo-responses
        w = self.z / s - self.F @ st.beta.T
        u = w @ omega
        gauss = -0.5 * np.sum(w * u) - 0.5 * n * logdet + 0.5 * np.sum(np.log1p(a)) - 0.5 * n * p * LOG_2PI

        # β | Σ, θ ~ N(0, Σ ⋆ P⁻¹)
        b = st.beta / xi
        ob = omega @ b
        beta_prior = -0.5 * np.sum(b * ob) - 0.5 * q * logdet - np.sum(st.log_xi) - 0.5 * p * q * LOG_2PI

        hs_value, hs_grad_xi, hs_grad_tau = horseshoe_log_prior(st.log_xi, st.log_tau)
        corr_value, corr_grad = self.correlation.log_prior(st.corr)

        value = float(gauss + beta_prior + hs_value + corr_value)
        if not with_grad:
            return value, None

        grad_beta = u.T @ self.F - ob / xi
        c = -0.5 * u * self.z * s + 0.5 * s * s
        grad_xi = 2.0 * xi2 * (c.T @ self._F2) + ob * b - 1.0 + hs_grad_xi
        dsigma = 0.5 * omega @ (w.T @ w + b @ b.T) @ omega - 0.5 * (n + q) * omega
        grad_corr = corr_grad + self.correlation.pullback(st.corr, 0.5 * (dsigma + dsigma.T))

        return value, self.layout.pack(grad_beta, grad_xi, hs_grad_tau, grad_corr)

    def log_copula_likelihood(self, eta: np.ndarray) -> float:
        """log φ_np(z; 0, R) with β integrated out analytically.

        Uses log p(z) = log p(z | β) + log p(β) − log p(β | z) at β = 0; the
        conditional posterior of β is Gaussian with precision
        Ω ⊗ FᵀF + P^{1/2}(Ω ⊗ I_q)P^{1/2}.
        """
        st = self.unpack(eta)
        n, p, q = self.n, self.p, self.q

        omega, logdet = invert_correlation(self.correlation.sigma(st.corr))
        xi = np.exp(st.log_xi)
        a = self._F2 @ (xi * xi).T
        s = 1.0 / np.sqrt(1.0 + a)
        w = self.z / s

        log_lik0 = -0.5 * np.sum(w * (w @ omega)) - 0.5 * n * logdet + 0.5 * np.sum(np.log1p(a)) - 0.5 * n * p * LOG_2PI
        log_prior0 = -0.5 * q * logdet - np.sum(st.log_xi) - 0.5 * p * q * LOG_2PI

        inv_xi = (1.0 / xi).ravel()
        precision = np.kron(omega, self.F.T @ self.F) + np.outer(inv_xi, inv_xi) * np.kron(omega, np.eye(q))
        rhs = (self.F.T @ (w @ omega)).T.ravel()
        try:
            chol = np.linalg.cholesky(precision)
        except np.linalg.LinAlgError as e:
            raise NumericalError("conditional precision of β is not positive definite") from e
        half = np.linalg.solve(chol, rhs)
        log_post0 = -0.5 * p * q * LOG_2PI + np.sum(np.log(np.diag(chol))) - 0.5 * float(half @ half)

        return float(log_lik0 + log_prior0 - log_post0)
