import numpy as np
import pytest
from scipy import stats
from scipy.integrate import trapezoid

from src.domain.dto import BasisSpec, FitConfig, PriorSpec
from src.domain.errors import InputError
from src.domain.types import CopulaLayout, FittedModel, VariationalParams
from src.services.basis_service import BasisService
from src.services.margins.parametric_margin import ExponentialMargin, NormalMargin
from src.services.predict_service import (
    PredictService,
    calibration_distance,
    empirical_cdf_matrix,
    spearman_from_pearson,
)
from src.services.regression_service import RegressionService

TRAIN_X = np.linspace(0.0, 1.0, 50)[:, None]
CENTER = 0.5
SD = float(np.std(TRAIN_X, ddof=1))


def _model(rho=0.5, beta=(0.0, 0.0), log_xi=(-20.0, -20.0), margins=None):
    """Hand-built p = 2 model on a linear basis in one covariate."""
    design, _ = BasisService().build(TRAIN_X, BasisSpec(kind="linear"))
    layout = CopulaLayout(p=2, q=1, prior=1)
    mu = layout.pack(
        np.reshape(beta, (2, 1)),
        np.reshape(log_xi, (2, 1)),
        np.zeros(2),
        np.array([np.arctanh(rho), 0.0]),
    )
    params = VariationalParams(mu=mu, loadings=np.zeros((layout.dim, 1)), delta=np.full(layout.dim, 1e-3))
    return FittedModel(
        params=params,
        layout=layout,
        basis=design.descriptor,
        margins=margins or [NormalMargin({"loc": 1.0, "scale": 2.0}), NormalMargin({"loc": -1.0, "scale": 0.5})],
        response_names=["a", "b"],
        prior=PriorSpec(kind=1),
        fit_config=FitConfig(),
    )


def test_plugin_density_with_normal_margins_is_bivariate_normal():
    predictor = PredictService(_model(rho=0.5))
    cov = np.array([[4.0, 0.5 * 2.0 * 0.5], [0.5 * 2.0 * 0.5, 0.25]])
    y = np.array([2.0, -0.7])

    expected = stats.multivariate_normal([1.0, -1.0], cov).logpdf(y)

    assert predictor.log_predictive_density(np.array([0.3]), y) == pytest.approx(expected, abs=1e-8)


def test_plugin_density_integrates_to_one():
    predictor = PredictService(_model(rho=-0.6, beta=(0.8, -0.4), log_xi=(0.0, 0.5)))
    grid_a = np.linspace(1.0 - 14.0, 1.0 + 14.0, 101)
    grid_b = np.linspace(-1.0 - 3.5, -1.0 + 3.5, 101)
    x = np.array([0.9])

    dens = np.array([[predictor.predictive_density(x, np.array([a, b])) for b in grid_b] for a in grid_a])

    assert trapezoid(trapezoid(dens, grid_b, axis=1), grid_a) == pytest.approx(1.0, abs=2e-3)


def test_pseudo_mean_and_marginal_mean():
    predictor = PredictService(_model(beta=(1.0, -2.0), log_xi=(0.0, 0.0)))
    x = np.array([CENTER + SD])  # standardized value 1

    m = predictor.pseudo_mean(x)

    assert np.allclose(m, np.array([1.0, -2.0]) / np.sqrt(2.0))
    # Normal margins map scores linearly, so the mean is exact
    assert predictor.marginal_mean(x, 0) == pytest.approx(1.0 + 2.0 * m[0], abs=1e-10)
    assert predictor.marginal_means(x)[1] == pytest.approx(-1.0 + 0.5 * m[1], abs=1e-10)


def test_marginal_mean_of_exponential_margin_at_zero_location():
    margins = [ExponentialMargin({"rate": 2.0}), NormalMargin({"loc": 0.0, "scale": 1.0})]
    predictor = PredictService(_model(margins=margins))

    assert predictor.marginal_mean(np.array([0.5]), 0) == pytest.approx(0.5, abs=1e-4)


def test_predictive_sample_moments():
    predictor = PredictService(_model(rho=0.7))

    batch = predictor.predictive_sample(np.array([0.2]), 20000, seed=3)

    assert batch.samples.shape == (20000, 2)
    assert batch.samples.mean(axis=0) == pytest.approx([1.0, -1.0], abs=0.05)
    assert np.corrcoef(batch.samples.T)[0, 1] == pytest.approx(0.7, abs=0.02)
    again = predictor.predictive_sample(np.array([0.2]), 20000, seed=3)
    assert np.array_equal(batch.samples, again.samples)


def test_marginal_density_integrates_to_one():
    margins = [ExponentialMargin({"rate": 1.0}), NormalMargin({"loc": 0.0, "scale": 1.0})]
    predictor = PredictService(_model(beta=(0.5, 0.0), log_xi=(0.0, 0.0), margins=margins))
    y = np.linspace(0.0, 60.0, 60001)

    dens = predictor.marginal_predictive_density(np.array([0.8]), 0, y)

    assert trapezoid(dens, y) == pytest.approx(1.0, abs=5e-3)
    assert predictor.marginal_predictive_density(np.array([0.8]), 0, np.array([-1.0]))[0] == 0.0


def test_spearman_matrix_kinds():
    rho = 0.4
    predictor = PredictService(_model(rho=rho, log_xi=(0.0, np.log(2.0))))
    x = np.array([CENTER + SD])

    predictive = predictor.spearman_matrix(x, kind="predictive")
    copula = predictor.spearman_matrix(x, kind="copula")

    assert np.allclose(np.diag(predictive), 1.0)
    assert predictive[0, 1] == pytest.approx(6.0 / np.pi * np.arcsin(rho / 2.0))
    # V = Σ ∘ (1 + ξ ξᵀ x̃²) with ξ = (1, 2) and x̃ = 1
    assert copula[0, 1] == pytest.approx(spearman_from_pearson(3.0 * rho / np.sqrt(10.0)))
    assert np.allclose(copula, copula.T)
    with pytest.raises(InputError):
        predictor.spearman_matrix(x, kind="kendall")


def test_monte_carlo_density_close_to_plugin_for_tight_posterior():
    predictor = PredictService(_model(rho=0.3))
    x, y = np.array([0.5]), np.array([1.5, -1.2])

    plugin = predictor.log_predictive_density(x, y)
    mc = predictor.log_predictive_density(x, y, mode="mc", mc_draws=50, seed=1)

    assert mc == pytest.approx(plugin, abs=1e-2)


def test_out_of_support_response_is_rejected():
    margins = [ExponentialMargin({"rate": 1.0}), NormalMargin({"loc": 0.0, "scale": 1.0})]
    predictor = PredictService(_model(margins=margins))

    with pytest.raises(InputError, match="a=-1"):
        predictor.log_predictive_density(np.array([0.5]), np.array([-1.0, 0.0]))
    with pytest.raises(InputError):
        predictor.log_predictive_density(np.array([0.5, 0.1]), np.array([1.0, 0.0]))


def test_linear_functional_sample():
    predictor = PredictService(_model(rho=0.0))

    draws = predictor.linear_functional_sample(np.array([0.5]), np.array([1.0, 2.0]), 20000, seed=0)

    assert draws.mean() == pytest.approx(1.0 - 2.0, abs=0.05)
    assert draws.var() == pytest.approx(4.0 + 4.0 * 0.25, rel=0.05)


def test_calibration_distance_of_matching_forecasts():
    rng = np.random.default_rng(0)
    grid = np.linspace(-3, 3, 61)
    samples = rng.normal(size=(100, 500))

    cdfs = empirical_cdf_matrix(samples, grid)

    assert cdfs.shape == (100, 61)
    assert calibration_distance(cdfs, stats.norm.cdf(grid)) < 0.02
    assert calibration_distance(cdfs, stats.norm.cdf(grid - 1.0)) > 0.3


def test_calibration_distance_of_shifted_forecasts():
    grid = np.linspace(-5.0, 5.0, 2001)
    shifted = np.tile(stats.norm.cdf(grid - 1.0), (50, 1))

    distance = calibration_distance(shifted, stats.norm.cdf(grid))

    assert distance > 0.2
    assert distance == pytest.approx(stats.norm.cdf(0.5) - stats.norm.cdf(-0.5), abs=1e-4)


def test_calibration_distance_from_samples_matches_mixture():
    rng = np.random.default_rng(1)
    grid = np.linspace(-5.0, 5.0, 1001)
    locs = np.where(np.arange(50) % 2 == 0, -1.0, 1.0)
    scales = np.where(np.arange(50) % 2 == 0, 1.0, 0.5)
    samples = locs[:, None] + scales[:, None] * rng.standard_normal((50, 10_000))

    mixture = 0.5 * stats.norm.cdf(grid, -1.0, 1.0) + 0.5 * stats.norm.cdf(grid, 1.0, 0.5)
    exact = np.max(np.abs(mixture - stats.norm.cdf(grid)))

    estimate = calibration_distance(empirical_cdf_matrix(samples, grid), stats.norm.cdf(grid))

    assert estimate == pytest.approx(exact, abs=0.01)


def test_fitted_model_recovers_positive_dependence():
    rng = np.random.default_rng(5)
    n = 300
    X = rng.uniform(size=(n, 1))
    z1 = rng.normal(size=n)
    z2 = 0.7 * z1 + np.sqrt(1 - 0.49) * rng.normal(size=n)
    Y = np.column_stack([np.exp(z1), z2 + X[:, 0]])

    model, trace, _ = RegressionService().fit(
        Y, X, BasisSpec(kind="linear"), PriorSpec(kind=1), FitConfig(iterations=2000, factors=2, seed=0),
    )
    predictor = PredictService(model)

    assert trace.log_likelihood is not None and np.isfinite(trace.log_likelihood)
    assert predictor.spearman_matrix(np.array([0.5]), kind="predictive")[0, 1] > 0.4
    assert np.isfinite(predictor.log_predictive_density(np.array([0.5]), np.array([1.0, 0.5])))


@pytest.mark.parametrize(("r", "expected"), [(0.0, 0.0), (1.0, 1.0), (0.5, 0.4825837), (-0.5, -0.4825837)])
def test_spearman_from_pearson_spot_values(r, expected):
    assert spearman_from_pearson(r) == pytest.approx(expected, abs=1e-7)
