import numpy as np
import pytest
from scipy import stats

from src.domain.dto import FitConfig
from src.domain.errors import FitDivergenceError, InputError, NumericalError
from src.domain.types import VariationalParams
from src.services.vi_service import (
    VariationalService,
    gradient_from_noise,
    log_det_covariance,
    log_q,
    loading_mask,
    woodbury_apply,
)


class GaussianTarget:
    """log h(η) = log N(η; m, C) up to a constant."""

    def __init__(self, mean: np.ndarray, cov: np.ndarray, offset: float = 0.0) -> None:
        self.mean = mean
        self.offset = offset
        self.precision = np.linalg.inv(cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def value_and_grad(self, eta):
        r = eta - self.mean
        pr = self.precision @ r
        return self.offset - 0.5 * float(r @ pr), -pr


class NanTarget:
    dim = 3

    def value_and_grad(self, eta):
        return float("nan"), np.full(3, np.nan)


def _params(dim=6, factors=2, seed=0):
    rng = np.random.default_rng(seed)
    loadings = rng.normal(size=(dim, factors)) * loading_mask(dim, factors)
    return VariationalParams(mu=rng.normal(size=dim), loadings=loadings, delta=rng.uniform(0.5, 1.5, size=dim))


def _target(dim=4, seed=1, offset=0.0):
    rng = np.random.default_rng(seed)
    b = rng.normal(scale=0.6, size=(dim, 1))
    cov = b @ b.T + np.diag(rng.uniform(0.3, 0.8, size=dim) ** 2)
    return GaussianTarget(rng.uniform(-1.0, 1.0, size=dim), cov, offset)


def test_loading_mask_is_lower_trapezoidal():
    mask = loading_mask(4, 2)

    assert mask.tolist() == [[1, 0], [1, 1], [1, 1], [1, 1]]


def test_woodbury_and_determinant_lemma_match_dense_algebra():
    params = _params()
    cov = params.loadings @ params.loadings.T + np.diag(params.delta**2)
    r = np.random.default_rng(2).normal(size=(6, 3))

    assert np.allclose(woodbury_apply(params.loadings, params.delta, r), np.linalg.solve(cov, r))
    assert log_det_covariance(params.loadings, params.delta) == pytest.approx(np.linalg.slogdet(cov)[1])


def test_woodbury_rejects_zero_delta():
    params = _params()
    params.delta[2] = 0.0

    with pytest.raises(InputError):
        woodbury_apply(params.loadings, params.delta, np.ones(6))


def test_log_q_matches_dense_normal():
    params = _params()
    cov = params.loadings @ params.loadings.T + np.diag(params.delta**2)
    eta = np.linspace(-1, 1, 6)

    assert log_q(params, eta) == pytest.approx(stats.multivariate_normal(params.mu, cov).logpdf(eta))


def _per_draw_elbo(target, mu, loadings, delta, w1, w2):
    """log h(η) − log q_λ(η) for every row of the noise (w1, w2), dense algebra."""
    offset = w1 @ loadings.T + w2 * delta
    r = mu + offset - target.mean
    log_h = target.offset - 0.5 * np.sum((r @ target.precision) * r, axis=1)
    cov = loadings @ loadings.T + np.diag(delta**2)
    quad = np.sum(offset * np.linalg.solve(cov, offset.T).T, axis=1)
    log_q = -0.5 * (mu.shape[0] * np.log(2 * np.pi) + np.linalg.slogdet(cov)[1] + quad)
    return log_h - log_q


def test_reparameterization_gradient_matches_common_noise_finite_differences():
    target = _target(dim=3, seed=1)
    params = _params(dim=3, factors=1, seed=3)
    draws = 100_000
    rng = np.random.default_rng(4)
    w1 = rng.standard_normal((draws, 1))
    w2 = rng.standard_normal((draws, 3))

    estimates = np.empty((draws, 9))
    for i in range(draws):
        result = gradient_from_noise(target, params, w1[i], w2[i])
        estimates[i] = np.concatenate([result.grad_mu, result.grad_loadings.ravel(), result.grad_delta])

    flat = np.concatenate([params.mu, params.loadings.ravel(), params.delta])
    step = 1e-5
    differences = np.empty((draws, 9))
    for k in range(9):
        e = np.zeros(9)
        e[k] = step
        up, down = flat + e, flat - e
        differences[:, k] = (
            _per_draw_elbo(target, up[:3], up[3:6, None], up[6:], w1, w2)
            - _per_draw_elbo(target, down[:3], down[3:6, None], down[6:], w1, w2)
        ) / (2 * step)

    gap = estimates - differences
    se = gap.std(axis=0, ddof=1) / np.sqrt(draws)
    # μ, B and δ blocks all agree in expectation
    assert np.all(np.abs(gap.mean(axis=0)) <= 3.0 * se)


def test_gradient_vanishes_when_q_reproduces_a_gaussian_target():
    rng = np.random.default_rng(5)
    b = rng.normal(scale=0.6, size=(4, 1))
    d = rng.uniform(0.3, 0.8, size=4)
    mean = rng.uniform(-1.0, 1.0, size=4)
    target = GaussianTarget(mean, b @ b.T + np.diag(d**2))
    params = VariationalParams(mu=mean.copy(), loadings=b.copy(), delta=d.copy())

    draws = 100_000
    samples = np.empty((draws, 12))
    for i in range(draws):
        result = gradient_from_noise(target, params, rng.standard_normal(1), rng.standard_normal(4))
        samples[i] = np.concatenate([result.grad_mu, result.grad_loadings.ravel(), result.grad_delta])

    se = samples.std(axis=0, ddof=1) / np.sqrt(draws)
    assert np.all(np.abs(samples.mean(axis=0)) <= 3.0 * se + 1e-9)


def test_fixed_loading_entries_get_no_gradient():
    target = _target()
    params = _params(dim=4, factors=2, seed=3)
    rng = np.random.default_rng(6)

    for _ in range(20):
        result = gradient_from_noise(target, params, rng.standard_normal(2), rng.standard_normal(4))
        assert result.grad_loadings[0, 1] == 0.0


def test_fit_recovers_gaussian_target():
    target = _target()
    config = FitConfig(iterations=5000, draws=1, factors=1, seed=7)

    params, trace = VariationalService().fit(target, config)
    cov = params.loadings @ params.loadings.T + np.diag(params.delta**2)
    target_cov = np.linalg.inv(target.precision)

    assert np.allclose(params.mu, target.mean, atol=0.02)
    assert np.allclose(np.diag(cov), np.diag(target_cov), rtol=0.15)
    assert trace.elbo.shape == (5000,)
    assert trace.smoothed[-1] > trace.smoothed[99]


def test_fit_is_deterministic_for_a_seed():
    target = _target()
    config = FitConfig(iterations=300, draws=3, factors=2, seed=11)

    first, _ = VariationalService().fit(target, config)
    second, _ = VariationalService(threads=3).fit(target, config)

    assert np.array_equal(first.mu, second.mu)
    assert np.array_equal(first.loadings, second.loadings)
    assert np.array_equal(first.delta, second.delta)


def test_early_stop_ends_before_budget():
    # Offset keeps the ELBO away from zero so the relative tolerance bites
    target = _target(offset=-10.0)
    config = FitConfig(iterations=20000, early_stop=True, early_stop_span=500, early_stop_tol=1e-3, seed=1)

    _, trace = VariationalService().fit(target, config)

    assert trace.elbo.shape[0] < 20000


def test_non_finite_target_is_rejected_then_fails():
    config = FitConfig(iterations=10, max_rejections=3)

    with pytest.raises((NumericalError, FitDivergenceError)):
        VariationalService().fit(NanTarget(), config)


def test_scale_bounds_must_increase():
    with pytest.raises(ValueError):
        FitConfig(log_scale_bounds=(2.0, -1.0))
