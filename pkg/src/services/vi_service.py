"""Factor-covariance Gaussian variational inference with reparameterization gradients.

q_λ(η) = N(μ, BBᵀ + Δ²) with B lower trapezoidal (T x M). Linear solves with
the covariance use the Woodbury identity and never form a T x T matrix.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol

import numpy as np
from tqdm import tqdm

from src.domain.dto import FitConfig
from src.domain.errors import FitDivergenceError, InputError, NumericalError
from src.domain.types import FitTrace, VariationalParams
from src.metrics.metrics import update_fit_metrics

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
LOG_EVERY = 1000


class VariationalTarget(Protocol):
    """Unnormalized log density h(η) to approximate."""

    @property
    def dim(self) -> int: ...

    def value_and_grad(self, eta: np.ndarray) -> tuple[float, np.ndarray]: ...


@dataclass
class DrawResult:
    """One reparameterized draw and its gradient contributions."""

    grad_mu: np.ndarray
    grad_loadings: np.ndarray
    grad_delta: np.ndarray
    elbo: float


def loading_mask(dim: int, factors: int) -> np.ndarray:
    """1 on the free (lower) entries of B, 0 on the fixed strict upper triangle."""
    return np.tril(np.ones((dim, factors)))


def sample_eta(params: VariationalParams, w1: np.ndarray, w2: np.ndarray) -> np.ndarray:
    """η = μ + B·w1 + δ∘w2."""
    return params.mu + params.loadings @ w1 + params.delta * w2


def woodbury_apply(loadings: np.ndarray, delta: np.ndarray, r: np.ndarray) -> np.ndarray:
    """(BBᵀ + Δ²)⁻¹ r in O(TM² + M³).

    Args:
        loadings (np.ndarray): B, T x M
        delta (np.ndarray): δ, length T, no zero entries
        r (np.ndarray): right-hand side, length T or T x k

    Raises:
        InputError: a zero entry in δ
        NumericalError: the inner M x M system is singular

    """
    if np.any(delta == 0):
        raise InputError("woodbury solve needs every delta entry non-zero")
    inv_d2 = 1.0 / (delta * delta)
    r = np.asarray(r, dtype=float)
    scaled_r = inv_d2 * r if r.ndim == 1 else inv_d2[:, None] * r
    scaled_b = inv_d2[:, None] * loadings
    inner = np.eye(loadings.shape[1]) + loadings.T @ scaled_b
    try:
        correction = np.linalg.solve(inner, loadings.T @ scaled_r)
    except np.linalg.LinAlgError as e:
        raise NumericalError("woodbury inner system is singular") from e
    return scaled_r - scaled_b @ correction


def log_det_covariance(loadings: np.ndarray, delta: np.ndarray) -> float:
    """log det(BBᵀ + Δ²) by the matrix determinant lemma."""
    inner = np.eye(loadings.shape[1]) + loadings.T @ (loadings / (delta * delta)[:, None])
    sign, logdet = np.linalg.slogdet(inner)
    if sign <= 0:
        raise NumericalError("determinant lemma inner matrix is not positive definite")
    return float(logdet + 2.0 * np.sum(np.log(np.abs(delta))))


def log_q(params: VariationalParams, eta: np.ndarray) -> float:
    r = eta - params.mu
    quad = float(r @ woodbury_apply(params.loadings, params.delta, r))
    return -0.5 * (params.dim * LOG_2PI + log_det_covariance(params.loadings, params.delta) + quad)


def gradient_from_noise(
        target: VariationalTarget,
        params: VariationalParams,
        w1: np.ndarray,
        w2: np.ndarray,
        log_det: float | None = None) -> DrawResult:
    """Reparameterization gradient for one fixed noise pair (w1, w2).

    With g = ∇log h(η) and e = (BBᵀ + Δ²)⁻¹(B·w1 + δ∘w2):
    ∇μ = g + e, ∇B = (g + e)·w1ᵀ on the free entries, ∇δ = (g + e)∘w2.
    """
    offset = params.loadings @ w1 + params.delta * w2
    eta = params.mu + offset
    value, grad = target.value_and_grad(eta)

    e = woodbury_apply(params.loadings, params.delta, offset)
    g = grad + e
    if log_det is None:
        log_det = log_det_covariance(params.loadings, params.delta)
    log_q_value = -0.5 * (params.dim * LOG_2PI + log_det + float(offset @ e))

    return DrawResult(
        grad_mu=g,
        grad_loadings=np.outer(g, w1) * loading_mask(*params.loadings.shape),
        grad_delta=g * w2,
        elbo=float(value) - log_q_value,
    )


def _is_finite(result: DrawResult) -> bool:
    return bool(
        np.isfinite(result.elbo)
        and np.all(np.isfinite(result.grad_mu))
        and np.all(np.isfinite(result.grad_delta)),
    )


def elbo_gradient(
        target: VariationalTarget,
        params: VariationalParams,
        draws: int,
        rng: np.random.Generator,
        max_rejections: int = 10,
        executor: ThreadPoolExecutor | None = None) -> tuple[DrawResult, int]:
    """Monte Carlo average of the reparameterization gradient over `draws` draws.

    Noise is generated sequentially from `rng` so the estimate does not depend
    on how many threads evaluate the draws. A draw whose gradient is not finite
    is rejected and resampled.

    Returns:
        tuple[DrawResult, int]: averaged gradient and ELBO, number of rejected draws

    Raises:
        NumericalError: one draw slot was rejected `max_rejections` times in a row

    """
    dim, factors = params.loadings.shape
    log_det = log_det_covariance(params.loadings, params.delta)
    results: list[DrawResult | None] = [None] * draws
    failures = [0] * draws
    rejected = 0

    def evaluate(noise: tuple[np.ndarray, np.ndarray]) -> DrawResult | None:
        try:
            result = gradient_from_noise(target, params, noise[0], noise[1], log_det)
        except NumericalError:
            return None
        return result if _is_finite(result) else None

    pending = list(range(draws))
    while pending:
        noises = [(rng.standard_normal(factors), rng.standard_normal(dim)) for _ in pending]
        if executor is None or len(pending) == 1:
            outcomes = [evaluate(noise) for noise in noises]
        else:
            outcomes = list(executor.map(evaluate, noises))

        retry = []
        for slot, outcome in zip(pending, outcomes, strict=True):
            if outcome is not None:
                results[slot] = outcome
                continue
            rejected += 1
            failures[slot] += 1
            if failures[slot] >= max_rejections:
                raise NumericalError(f"{max_rejections} consecutive draws gave a non-finite gradient")
            retry.append(slot)
        if retry:
            logger.warning("Rejected %d draws with a non-finite gradient, resampling", len(retry))
        pending = retry

    done = [r for r in results if r is not None]
    return DrawResult(
        grad_mu=np.mean([r.grad_mu for r in done], axis=0),
        grad_loadings=np.mean([r.grad_loadings for r in done], axis=0),
        grad_delta=np.mean([r.grad_delta for r in done], axis=0),
        elbo=float(np.mean([r.elbo for r in done])),
    ), rejected


def elbo_estimate(
        target: VariationalTarget,
        params: VariationalParams,
        draws: int,
        rng: np.random.Generator) -> float:
    """Monte Carlo average of log h(η) − log q_λ(η)."""
    dim, factors = params.loadings.shape
    log_det = log_det_covariance(params.loadings, params.delta)
    total = 0.0
    for _ in range(draws):
        w1, w2 = rng.standard_normal(factors), rng.standard_normal(dim)
        offset = params.loadings @ w1 + params.delta * w2
        value, _ = target.value_and_grad(params.mu + offset)
        quad = float(offset @ woodbury_apply(params.loadings, params.delta, offset))
        total += float(value) + 0.5 * (dim * LOG_2PI + log_det + quad)
    return total / draws


class _Adadelta:
    """Per-coordinate step sizes from decayed squared gradients and squared updates."""

    def __init__(self, shape: tuple[int, ...], decay: float, damping: float) -> None:
        self.decay = decay
        self.damping = damping
        self.grad_sq = np.zeros(shape)
        self.step_sq = np.zeros(shape)

    def step(self, grad: np.ndarray) -> np.ndarray:
        self.grad_sq = self.decay * self.grad_sq + (1.0 - self.decay) * grad * grad
        step = np.sqrt(self.step_sq + self.damping) / np.sqrt(self.grad_sq + self.damping) * grad
        self.step_sq = self.decay * self.step_sq + (1.0 - self.decay) * step * step
        return step


def initial_params(
        dim: int,
        config: FitConfig,
        rng: np.random.Generator,
        mean: np.ndarray | None = None) -> VariationalParams:
    factors = min(config.factors, dim)
    mu = np.zeros(dim) if mean is None else np.asarray(mean, dtype=float).copy()
    if mu.shape != (dim,):
        raise InputError(f"initial mean has shape {mu.shape}, expected ({dim},)")
    loadings = rng.normal(0.0, config.init_loading_sd, size=(dim, factors)) * loading_mask(dim, factors)
    delta = np.full(dim, config.init_delta)
    return VariationalParams(mu=mu, loadings=loadings, delta=delta)


class VariationalService:
    """Runs the stochastic gradient ascent on the ELBO.

    Args:
        threads (int): workers evaluating the per-iteration draws
        show_progress (bool): display a tqdm progress bar

    """

    def __init__(self, threads: int = 1, show_progress: bool = False) -> None:
        self.threads = max(1, threads)
        self.show_progress = show_progress

    def fit(
            self,
            target: VariationalTarget,
            config: FitConfig,
            initial_mean: np.ndarray | None = None) -> tuple[VariationalParams, FitTrace]:
        """Fit q_λ to h.

        Args:
            target (VariationalTarget): log h and its gradient
            config (FitConfig): iteration budget, draws, factors, step rule and seed
            initial_mean (np.ndarray | None): starting μ, zeros when omitted

        Returns:
            tuple[VariationalParams, FitTrace]: final λ and the ELBO trace

        Raises:
            FitDivergenceError: the smoothed ELBO became NaN

        """
        start = time.perf_counter()
        rng = np.random.default_rng(config.seed)
        params = initial_params(target.dim, config, rng, initial_mean)
        mask = loading_mask(*params.loadings.shape)

        steppers = [
            _Adadelta(params.mu.shape, config.decay, config.damping),
            _Adadelta(params.loadings.shape, config.decay, config.damping),
            _Adadelta(params.delta.shape, config.decay, config.damping),
        ]

        elbo = np.empty(config.iterations)
        smoothed = np.empty(config.iterations)
        window_sum = 0.0
        rejected = 0
        done = 0

        logger.info(
            "VI start: T=%d, M=%d, draws=%d, iterations=%d",
            params.dim, params.factors, config.draws, config.iterations,
        )
        executor = ThreadPoolExecutor(self.threads) if self.threads > 1 and config.draws > 1 else None
        try:
            for it in tqdm(range(config.iterations), desc="VI", disable=not self.show_progress):
                estimate, n_rejected = elbo_gradient(
                    target, params, config.draws, rng, config.max_rejections, executor,
                )
                rejected += n_rejected

                grads = [estimate.grad_mu, estimate.grad_loadings, estimate.grad_delta]
                norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
                if norm > config.clip_norm:
                    grads = [g * (config.clip_norm / norm) for g in grads]

                params.mu += steppers[0].step(grads[0])
                params.loadings += steppers[1].step(grads[1]) * mask
                params.delta += steppers[2].step(grads[2])

                elbo[it] = estimate.elbo
                window_sum += estimate.elbo
                if it >= config.elbo_window:
                    window_sum -= elbo[it - config.elbo_window]
                smoothed[it] = window_sum / min(it + 1, config.elbo_window)
                done = it + 1

                finite = all(np.all(np.isfinite(x)) for x in (params.mu, params.loadings, params.delta))
                if np.isnan(smoothed[it]) or not finite:
                    logger.error("VI diverged at iteration %d, mu=%s, delta=%s", done, params.mu, params.delta)
                    raise FitDivergenceError(
                        f"smoothed ELBO is NaN at iteration {done}", params=params.copy(), iteration=done,
                    )
                if done % LOG_EVERY == 0:
                    logger.debug("VI iteration %d: smoothed ELBO %.4f", done, smoothed[it])
                if config.early_stop and self._converged(smoothed, it, config):
                    logger.info("VI early stop at iteration %d", done)
                    break
        finally:
            if executor is not None:
                executor.shutdown()

        elapsed_ms = int((time.perf_counter() - start) * 1000)
        trace = FitTrace(
            elbo=elbo[:done].copy(),
            smoothed=smoothed[:done].copy(),
            wall_clock_ms=elapsed_ms,
            final=params.copy(),
            rejected_draws=rejected,
        )
        update_fit_metrics(elapsed_ms, float(trace.smoothed[-1]), rejected)
        logger.info("VI done: %d iterations, smoothed ELBO %.4f, %d ms", done, trace.smoothed[-1], elapsed_ms)
        return params, trace

    @staticmethod
    def _converged(smoothed: np.ndarray, it: int, config: FitConfig) -> bool:
        span = config.early_stop_span
        if it < 2 * span:
            return False
        before, now = smoothed[it - span], smoothed[it]
        return bool(now - before < config.early_stop_tol * abs(before))
