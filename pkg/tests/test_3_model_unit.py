import numpy as np
import pytest
from scipy import stats
from scipy.linalg import block_diag

from src.domain.dto import PriorSpec
from src.domain.errors import InputError, NumericalError
from src.domain.types import CopulaLayout
from src.services.copula_model import (
    CopulaPosterior,
    horseshoe_log_prior,
    horseshoe_precision_inv,
    log_half_cauchy,
    scale_factor,
    scale_factors,
    star_product,
)
from src.services.correlation.base import invert_correlation
from src.services.correlation.factor import FactorCorrelation, corr_from_factors
from src.services.correlation.matrix_log import (
    corr_from_v,
    corr_from_v_with_iterations,
    v_from_corr,
    v_jacobian,
)


def _problem(n=8, p=2, q=3, seed=0, prior=None):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, p))
    F = rng.normal(size=(n, q))
    return CopulaPosterior(z, F, prior)


def _random_state(model, seed=1, scale=0.3):
    return scale * np.random.default_rng(seed).normal(size=model.dim)


def _dense_copula_correlation(model, eta):
    """R = diag(s)·Cov(z̃)·diag(s) for the stacked vector (z_11..z_1p, z_21, ...)."""
    st = model.unpack(eta)
    sigma = model.sigma(eta)
    xi = np.exp(st.log_xi)
    n, p = model.n, model.p
    s = scale_factors(model.F, st.log_xi).ravel()

    cov = np.empty((n * p, n * p))
    for i in range(n):
        for k in range(n):
            for j in range(p):
                for l in range(p):
                    shared = np.sum(model.F[i] * model.F[k] * xi[j] * xi[l])
                    cov[i * p + j, k * p + l] = sigma[j, l] * ((i == k) + shared)
    return cov * np.outer(s, s)


def test_layout_sizes():
    assert CopulaLayout(p=3, q=4, prior=1).dim == 12 + 15 + 4
    assert CopulaLayout(p=3, q=4, prior=2, factors=2).dim == 12 + 15 + 5
    assert CopulaLayout(p=3, q=4, prior=2, factors=2).factor_entries == [(1, 0), (2, 0), (2, 1)]

    with pytest.raises(InputError):
        CopulaLayout(p=2, q=3, prior=2, factors=3)


def test_layout_pack_unpack():
    layout = CopulaLayout(p=2, q=3, prior=1)
    eta = np.arange(layout.dim, dtype=float)

    st = layout.unpack(eta)
    back = layout.pack(st.beta, st.log_xi, st.log_tau, st.corr)

    assert np.array_equal(back, eta)
    assert st.beta.shape == (2, 3)
    assert st.log_tau.tolist() == [9.0, 13.0]
    assert layout.names()[-1] == "log_sigma_v2"


def test_scale_factor_matches_dense_prior_covariance():
    rng = np.random.default_rng(2)
    x = rng.normal(size=4)
    log_xi = rng.normal(size=4)
    p_inv = np.diag(np.exp(2 * log_xi))

    assert scale_factor(x, log_xi) == pytest.approx((1.0 + x @ p_inv @ x) ** -0.5)


def test_star_product_with_equal_blocks_is_kronecker():
    sigma = np.array([[1.0, 0.4], [0.4, 1.0]])
    block = np.diag([0.5, 2.0, 1.5])

    assert np.allclose(star_product(sigma, [block, block]), np.kron(sigma, block))

    with pytest.raises(NumericalError):
        star_product(np.array([[1.0, 2.0], [2.0, 1.0]]), [block, block])


def test_horseshoe_prior_matches_half_cauchy_densities():
    rng = np.random.default_rng(3)
    log_xi = rng.normal(size=(2, 3))
    log_tau = rng.normal(size=2)

    value, _, _ = horseshoe_log_prior(log_xi, log_tau)
    tau = np.exp(log_tau)
    expected = np.sum(log_half_cauchy(np.exp(log_xi), tau[:, None]) + log_xi)
    expected += np.sum(log_half_cauchy(tau) + log_tau)

    assert value == pytest.approx(expected)


def test_matrix_log_round_trip():
    v = np.array([0.3, -0.2, 0.5])

    sigma, iterations = corr_from_v_with_iterations(v)

    assert np.allclose(np.diag(sigma), 1.0)
    assert np.linalg.eigvalsh(sigma).min() > 0
    assert iterations < 200
    assert np.allclose(v_from_corr(sigma), v, atol=1e-9)


@pytest.mark.parametrize("v", [-2.0, -0.5, 0.0, 0.7, 3.0])
def test_matrix_log_two_dimensional_is_tanh(v):
    sigma = corr_from_v(np.array([v]))

    assert sigma[1, 0] == pytest.approx(np.tanh(v), abs=1e-10)
    assert v_from_corr(sigma)[0] == pytest.approx(v, abs=1e-8)


def test_factor_correlation_identity_at_zero():
    prior = FactorCorrelation(p=4, factors=2)

    assert np.allclose(prior.sigma(prior.initial()), np.eye(4))
    sigma = corr_from_factors(np.array([[1.0], [0.5], [-2.0]]))
    assert np.allclose(np.diag(sigma), 1.0)
    assert sigma[0, 1] == pytest.approx(0.5 / np.sqrt(2.0 * 1.25))


def test_invert_correlation_refuses_singular_matrix():
    with pytest.raises(NumericalError):
        invert_correlation(np.ones((3, 3)))


def test_initial_mean_decodes_to_identity():
    for prior in (PriorSpec(kind=1), PriorSpec(kind=2, factors=2)):
        model = _problem(p=3, prior=prior)

        assert np.allclose(model.sigma(model.initial_mean()), np.eye(3))


@pytest.mark.parametrize("prior", [PriorSpec(kind=1), PriorSpec(kind=2, factors=1), PriorSpec(kind=2, factors=2)])
def test_gradient_matches_finite_differences(prior):
    model = _problem(n=10, p=3, q=2, prior=prior)
    eta = _random_state(model)
    _, grad = model.value_and_grad(eta)

    step = 1e-5
    numeric = np.empty(model.dim)
    for k in range(model.dim):
        e = np.zeros(model.dim)
        e[k] = step
        numeric[k] = (model.log_h(eta + e) - model.log_h(eta - e)) / (2 * step)

    assert np.allclose(grad, numeric, rtol=1e-4, atol=1e-4)


@pytest.mark.parametrize("prior", [PriorSpec(kind=1), PriorSpec(kind=2, factors=1)])
def test_copula_likelihood_matches_dense_gaussian(prior):
    model = _problem(n=6, p=2, q=3, prior=prior)
    eta = _random_state(model, seed=4)

    R = _dense_copula_correlation(model, eta)
    expected = stats.multivariate_normal(np.zeros(R.shape[0]), R).logpdf(model.z.ravel())

    assert np.allclose(np.diag(R), 1.0)
    assert model.log_copula_likelihood(eta) == pytest.approx(expected, rel=1e-8)


def test_posterior_rejects_mismatched_inputs():
    with pytest.raises(InputError):
        CopulaPosterior(np.zeros((5, 2)), np.zeros((4, 3)))


def test_initial_mean_is_ridge_fit_of_scaled_responses():
    model = _problem(n=30, p=2, q=3, seed=5)

    st = model.unpack(model.initial_mean(ridge=2.0))

    level = model.initial_log_scale()
    assert np.allclose(st.log_xi, level)
    assert np.allclose(st.log_tau, level)
    pseudo = model.z / scale_factors(model.F, st.log_xi)
    gram = model.F.T @ model.F + 2.0 * np.exp(-2.0 * level) * np.eye(3)
    assert np.allclose(st.beta, np.linalg.solve(gram, model.F.T @ pseudo).T)


def test_find_mode_climbs_within_the_scale_box():
    model = _problem(n=40, p=2, q=3, seed=6)
    start = model.initial_mean()
    start[model.layout.horseshoe_slice] = 10.0

    mode = model.find_mode(start, max_iter=300, scale_bounds=(-4.0, 2.0))

    scales = mode[model.layout.horseshoe_slice]
    assert np.all((scales >= -4.0) & (scales <= 2.0))
    clipped = start.copy()
    clipped[model.layout.horseshoe_slice] = 2.0
    assert model.log_h(mode) > model.log_h(clipped)


def test_star_product_matches_dense_kronecker_construction():
    rng = np.random.default_rng(8)
    for _ in range(100):
        p = int(rng.integers(2, 6))
        q = int(rng.integers(1, min(8, 64 // p) + 1))
        a = rng.normal(size=(p, p))
        cov = a @ a.T + 0.5 * np.eye(p)
        sigma = cov / np.sqrt(np.outer(np.diag(cov), np.diag(cov)))
        blocks = []
        for _ in range(p):
            a = rng.normal(size=(q, q))
            blocks.append(a @ a.T + 0.5 * np.eye(q))

        upper = block_diag(*[np.linalg.cholesky(block).T for block in blocks])
        dense = upper.T @ np.kron(sigma, np.eye(q)) @ upper

        assert np.allclose(star_product(sigma, blocks), dense, rtol=0.0, atol=1e-10)


def test_prior_on_each_equation_has_horseshoe_covariance():
    rng = np.random.default_rng(9)
    sigma = corr_from_v(np.array([0.6, -0.3, 0.2]))
    log_xi = np.log(np.array([[0.5, 1.2], [1.0, 0.3], [0.8, 1.5]]))

    cov = star_product(sigma, [np.diag(horseshoe_precision_inv(row)) for row in log_xi])
    draws = rng.multivariate_normal(np.zeros(6), cov, size=200_000)

    for j in range(3):
        block = np.cov(draws[:, 2 * j:2 * j + 2], rowvar=False)
        assert np.allclose(block, np.diag(np.exp(2 * log_xi[j])), rtol=0.02, atol=0.02)


def _dense_log_h(model, eta):
    """log h from the stacked Gaussians and scipy densities, prior 1 correlation."""
    st = model.unpack(eta)
    sigma = model.sigma(eta)
    n, q = model.n, model.q
    s = scale_factors(model.F, st.log_xi)

    resid = (model.z / s - model.F @ st.beta.T).T.ravel()
    value = stats.multivariate_normal(np.zeros(resid.shape[0]), np.kron(sigma, np.eye(n))).logpdf(resid)
    value -= np.sum(np.log(s))

    prior_cov = star_product(sigma, [np.diag(horseshoe_precision_inv(row)) for row in st.log_xi])
    value += stats.multivariate_normal(np.zeros(prior_cov.shape[0]), prior_cov).logpdf(st.beta.ravel())

    tau = np.exp(st.log_tau)
    value += np.sum(stats.halfcauchy(scale=tau[:, None]).logpdf(np.exp(st.log_xi)) + st.log_xi)
    value += np.sum(stats.halfcauchy.logpdf(tau) + st.log_tau)

    m = model.correlation.m
    v, log_var = st.corr[:m], st.corr[m]
    value += np.sum(stats.norm(scale=np.exp(0.5 * log_var)).logpdf(v))
    ig = stats.invgamma(model.correlation.shape, scale=model.correlation.scale)
    value += ig.logpdf(np.exp(log_var)) + log_var
    return value


def test_log_h_matches_dense_augmented_posterior():
    model = _problem(n=7, p=3, q=2, seed=10)
    for seed in range(5):
        eta = _random_state(model, seed=seed)

        assert model.log_h(eta) == pytest.approx(_dense_log_h(model, eta), abs=1e-8)


@pytest.mark.parametrize(("v", "expected"), [(0.0, 1.0), (1.0, 0.419974341614026)])
def test_matrix_log_jacobian_is_sech_squared_in_two_dimensions(v, expected):
    assert v_jacobian(np.array([v]))[0, 0] == pytest.approx(expected, abs=1e-8)
