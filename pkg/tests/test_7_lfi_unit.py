import numpy as np
import pytest
from scipy import stats
from scipy.integrate import quad

from src.domain.dto import FitConfig, LfiSpec
from src.domain.errors import InputError, SamplingError
from src.domain.types import CensusData, CensusDesign, HyperParams
from src.services.lfi.simulator import (
    ald_logpdf,
    default_census,
    logseries_parameter,
    sample_ald,
    sample_hyperpriors,
    sample_trunc_lognormal,
    simulate_census,
)
from src.services.lfi.summaries import summaries, variance_scaling_exponent
from src.services.lfi_service import LfiService, abundance_variance, prior_margins, to_natural

PSI = HyperParams(omega=-3.3, sigma2=1.0, c=0.07, phi1=100.0, phi2=100.0)


def _within(sample: np.ndarray, expected: float, n_se: float = 3.0) -> bool:
    se = sample.std(ddof=1) / np.sqrt(sample.shape[0])
    return abs(sample.mean() - expected) <= n_se * se


def test_hyperprior_moments():
    rng = np.random.default_rng(0)
    draws = np.array([sample_hyperpriors(rng).to_response() for _ in range(20000)])
    natural = to_natural(draws)

    assert _within(natural[:, 0], -3.3)
    assert _within(natural[:, 2], 0.07)
    assert _within(natural[:, 3], 100.0)
    assert _within(natural[:, 4], 100.0)
    # IG(2, 1) has no variance, compare the median instead
    assert np.median(natural[:, 1]) == pytest.approx(stats.invgamma(2.0, scale=1.0).median(), rel=0.05)


def test_prior_margins_match_hyperprior_draws():
    rng = np.random.default_rng(1)
    draws = np.array([sample_hyperpriors(rng).to_response() for _ in range(5000)])

    for j, margin in enumerate(prior_margins()):
        assert stats.kstest(draws[:, j], margin.cdf).pvalue > 1e-3


def test_ald_density_integrates_to_one():
    total = quad(lambda x: np.exp(ald_logpdf(x, 0.1, 30.0, 80.0)), -2.0, 0.1)[0]
    total += quad(lambda x: np.exp(ald_logpdf(x, 0.1, 30.0, 80.0)), 0.1, 2.0)[0]

    assert total == pytest.approx(1.0, abs=1e-8)


def test_ald_sample_moments():
    c, phi1, phi2 = 0.05, 40.0, 120.0
    draws = sample_ald(c, phi1, phi2, np.random.default_rng(2), size=200_000)

    assert _within(draws, c + 1.0 / phi1 - 1.0 / phi2)
    upper = (draws >= c).astype(float)
    assert _within(upper, phi2 / (phi1 + phi2))
    assert isinstance(sample_ald(c, phi1, phi2, np.random.default_rng(2)), float)


def test_ald_rejects_non_positive_rates():
    with pytest.raises(InputError):
        sample_ald(0.0, 0.0, 1.0, np.random.default_rng(0))


def test_truncated_lognormal_follows_conditional_law():
    omega, sigma2 = -3.0, 0.5
    lower = float(stats.lognorm(s=np.sqrt(sigma2), scale=np.exp(omega)).ppf(0.99))
    rng = np.random.default_rng(3)

    draws = sample_trunc_lognormal(omega, sigma2, np.full(5000, lower), rng)

    def conditional_cdf(x):
        a = (np.log(x) - omega) / np.sqrt(sigma2)
        a0 = (np.log(lower) - omega) / np.sqrt(sigma2)
        return (stats.norm.cdf(a) - stats.norm.cdf(a0)) / stats.norm.sf(a0)

    assert np.all(draws > lower)
    assert stats.kstest(draws, conditional_cdf).pvalue > 1e-3


def test_truncated_lognormal_inactive_bound_and_vanishing_mass():
    rng = np.random.default_rng(4)

    draws = sample_trunc_lognormal(0.0, 1.0, np.full(5000, -1.0), rng)

    assert stats.kstest(draws, stats.lognorm(s=1.0).cdf).pvalue > 1e-3
    with pytest.raises(SamplingError, match="truncation mass"):
        sample_trunc_lognormal(0.0, 1.0, np.exp(10.0), rng)


def test_census_without_mortality_keeps_every_tree():
    design = CensusDesign(n_init=np.arange(1, 101), duration=np.full(100, 5.0))

    data = simulate_census(PSI, design, np.random.default_rng(5), fixed_mortality=0.0)

    assert np.array_equal(data.survivors, data.n_init)
    assert np.all(data.recruits >= 0)


def test_census_conservation_and_expected_abundance():
    n_species = 20000
    design = CensusDesign(n_init=np.full(n_species, 100), duration=np.full(n_species, 5.0))

    data = simulate_census(PSI, design, np.random.default_rng(6), fixed_mortality=0.05, fixed_growth=0.02)

    assert np.all((data.survivors >= 0) & (data.survivors <= data.n_init))
    assert np.array_equal(data.n_next, data.survivors + data.recruits)
    assert _within(data.n_next.astype(float), 100.0 * np.exp(0.02 * 5.0))


def test_census_growth_and_mortality_respect_truncation():
    design = default_census(species=500, seed=1)

    data = simulate_census(PSI, design, np.random.default_rng(7))

    assert np.all(data.mortality > 0)
    assert np.all(data.mortality > -data.growth)


def test_census_design_validation():
    with pytest.raises(InputError):
        CensusDesign(n_init=np.array([1, 2]), duration=np.array([5.0]))
    with pytest.raises(InputError):
        CensusDesign(n_init=np.array([1, -2]), duration=np.array([5.0, 5.0]))
    with pytest.raises(InputError):
        CensusDesign(n_init=np.array([1, 2]), duration=np.array([5.0, 0.0]))


def test_logseries_design_has_requested_median():
    p = logseries_parameter(8)
    design = default_census(species=800, median_abundance=8, duration=5.0, seed=2)

    assert stats.logser.cdf(7, p) < 0.5 <= stats.logser.cdf(8, p)
    assert design.species == 800
    assert np.all(design.n_init >= 1)
    assert np.all(design.duration == 5.0)


def _oracle_census(duration=5.0):
    """10 abundance groups of 60 species with N = 2^(k+1); half double, half vanish."""
    n = np.repeat(2 ** np.arange(1, 11), 60)
    doubles = np.tile([True, False], 300)
    return CensusData(
        n_init=n,
        survivors=np.where(doubles, n, 0),
        recruits=np.where(doubles, n, 0),
        duration=np.full(n.shape[0], duration),
    )


def test_summaries_of_constructed_census():
    h = summaries(_oracle_census())

    # Within-group variance of ±N is N², so the log-log slope is 2
    assert h[0] == pytest.approx(2.0, abs=1e-6)
    assert h[1] == pytest.approx(0.5)
    assert h[2] == pytest.approx(0.5 / 5.0)
    assert h[3] == pytest.approx(1.0)
    assert h[4] == pytest.approx(1.0 / 5.0)


def test_variance_scaling_needs_two_usable_bins():
    n = np.arange(1.0, 101.0)

    with pytest.raises(InputError):
        variance_scaling_exponent(n, np.zeros(100))


def test_summaries_need_enough_species():
    data = _oracle_census()
    small = CensusData(
        n_init=data.n_init[:40], survivors=data.survivors[:40], recruits=data.recruits[:40], duration=data.duration[:40],
    )

    with pytest.raises(InputError, match="50 species"):
        summaries(small)


def test_abundance_variance_scales_with_n_squared():
    ratio = abundance_variance(200.0, 5.0, 1e-3, 0.0) / abundance_variance(100.0, 5.0, 1e-3, 0.0)

    assert ratio == pytest.approx(4.0)


def test_environmental_variance_of_symmetric_ald():
    phi = 50.0
    psi = HyperParams(omega=-3.3, sigma2=0.5, c=0.0, phi1=phi, phi2=phi)
    inner = 100_000

    result = LfiService.demographic_variance(psi, n=100.0, duration=5.0, inner_draws=inner, seed=1)
    # Laplace kurtosis is 6, so Var(s²) ≈ 5σ⁴/n
    se = (2.0 / phi**2) * np.sqrt(5.0 / inner)

    assert result.env_variance[0] == pytest.approx(2.0 / phi**2, abs=4.0 * se)
    assert result.demo_variance[0] > 0
    assert result.summary()["variance"] == pytest.approx(
        abundance_variance(100.0, 5.0, result.env_variance[0], result.demo_variance[0]),
    )


def test_point_estimate_is_componentwise_median():
    draws = np.array([[-3.0, 0.5, 0.0, 80.0, 90.0], [-2.0, 1.5, 0.1, 120.0, 110.0], [-4.0, 1.0, 0.2, 100.0, 100.0]])

    psi = LfiService.point_estimate(draws)

    assert psi == HyperParams(omega=-3.0, sigma2=1.0, c=0.1, phi1=100.0, phi2=100.0)


def test_training_set_is_independent_of_thread_count():
    design = default_census(species=200, seed=3)

    single = LfiService(threads=1).simulate_training_set(24, design, seed=5)
    pooled = LfiService(threads=4).simulate_training_set(24, design, seed=5)

    assert single.n + single.dropped == 24
    assert single.responses.shape == (single.n, 5)
    assert single.summaries.shape == (single.n, 5)
    assert np.array_equal(single.responses, pooled.responses)
    assert np.array_equal(single.summaries, pooled.summaries)
    assert single.to_frame().columns.tolist()[:2] == ["omega", "log_sigma2"]


def test_training_refuses_too_few_simulations():
    spec = LfiSpec(n_sims=10, min_sims=500)

    with pytest.raises(InputError, match="at least 500"):
        LfiService().train(spec, default_census(species=100), FitConfig(iterations=10))
