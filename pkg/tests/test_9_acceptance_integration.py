import io

import numpy as np
import pandas as pd
import pytest
import yaml
from click.testing import CliRunner

from src.controllers.cli import cli
from src.domain.dto import BasisSpec, FitConfig, ModelSpec, PriorSpec, SynthSpec
from src.domain.types import HyperParams
from src.infrastructure.service_provider import get_testing_settings
from src.services.bench.synth import implied_spearman, synth_generate
from src.services.bench_service import BenchService
from src.services.correlation.matrix_log import corr_from_v, corr_from_v_with_iterations, v_from_corr
from src.services.lfi.simulator import default_census, simulate_census
from src.services.lfi.summaries import summaries
from src.services.predict_service import PredictService
from src.services.regression_service import RegressionService


@pytest.fixture(autouse=True)
def _testing_settings(monkeypatch):
    monkeypatch.setattr("src.controllers.cli.get_settings", get_testing_settings)


def _random_correlation(p: int, rng: np.random.Generator) -> np.ndarray:
    loadings = rng.normal(scale=0.6, size=(p, 2))
    cov = loadings @ loadings.T + np.diag(rng.uniform(0.5, 1.5, size=p))
    scale = 1.0 / np.sqrt(np.diag(cov))
    sigma = cov * np.outer(scale, scale)
    np.fill_diagonal(sigma, 1.0)
    return sigma


@pytest.mark.parametrize("p", [2, 3, 5, 8])
def test_matrix_log_parameterization_round_trip(p):
    """Every correlation matrix is reached by exactly one v.

    Steps:
    - Draw random correlation matrices of size p
    - Map them to v and back

    Asserts:
    - The round trip reproduces the matrix within 1e-8
    - The diagonal recursion needs at most 60 iterations
    """
    rng = np.random.default_rng(p)
    for _ in range(100):
        sigma0 = _random_correlation(p, rng)

        sigma, iterations = corr_from_v_with_iterations(v_from_corr(sigma0))

        assert np.allclose(sigma, sigma0, atol=1e-8)
        assert iterations <= 60


@pytest.mark.parametrize("rho", [-0.9, -0.5, 0.0, 0.5, 0.9])
def test_matrix_log_of_two_by_two_is_atanh(rho):
    sigma = np.array([[1.0, rho], [rho, 1.0]])

    assert v_from_corr(sigma)[0] == pytest.approx(np.arctanh(rho), abs=1e-10)
    assert corr_from_v(np.array([np.arctanh(rho)]))[0, 1] == pytest.approx(rho, abs=1e-10)


def test_synthetic_spearman_recovery():
    """A fit on data from the model's own law recovers its dependence.

    Steps:
    - Generate n = 2000 rows with three responses and known Σ on the generator's basis
    - Fit the copula with the same basis

    Asserts:
    - Spearman correlations at the covariate mean are within 0.1 of the generator's
    """
    sigma = [[1.0, 0.6, 0.3], [0.6, 1.0, 0.1], [0.3, 0.1, 1.0]]
    dataset = synth_generate(SynthSpec(n=2000, p=3, d=2, sigma=sigma, seed=11))

    model, trace, _ = RegressionService().fit(
        dataset.responses,
        dataset.covariates,
        dataset.basis.spec,
        PriorSpec(kind=1),
        FitConfig(iterations=6000, factors=3, seed=2),
    )
    fitted = PredictService(model).spearman_matrix(dataset.covariates.mean(axis=0), kind="predictive")

    assert dataset.basis.q <= 10
    assert np.abs(fitted - implied_spearman(dataset)).max() < 0.1
    last, first = trace.smoothed[-600:].mean(), trace.smoothed[:600].mean()
    assert last > first


@pytest.mark.parametrize("prior", [PriorSpec(kind=1), PriorSpec(kind=2, factors=1)])
def test_benchmark_prefers_smooth_basis_on_nonlinear_mean(prior):
    """Cross-validation ranks the spline basis above the linear one on a curved mean.

    Steps:
    - Build two responses whose means are a sine and a cosine of the covariate
    - Run 10-fold cross-validation of MVC with a thin-plate basis and with a linear basis

    Asserts:
    - Every fold completes for both models
    - The thin-plate model has lower CRPS and lower LS
    """
    rng = np.random.default_rng(21)
    n = 150
    x = rng.uniform(size=(n, 1))
    e = rng.multivariate_normal([0.0, 0.0], [[1.0, 0.4], [0.4, 1.0]], size=n)
    Y = np.column_stack([np.sin(2 * np.pi * x[:, 0]) + 0.15 * e[:, 0], np.cos(2 * np.pi * x[:, 0]) + 0.15 * e[:, 1]])
    models = [
        ModelSpec(name="MVC", basis=BasisSpec(kind="tps", knots=6), prior=prior),
        ModelSpec(name="MVC.lin", basis=BasisSpec(kind="linear"), prior=prior),
    ]

    table = BenchService(samples_per_row=200).kfold_cv(
        Y, x, models, FitConfig(iterations=2500, factors=2, seed=0), folds=10, seed=1,
    )
    rows = {r.model: r for r in table.rows}

    assert not rows["MVC"].failed and not rows["MVC.lin"].failed
    assert rows["MVC"].crps < rows["MVC.lin"].crps
    assert rows["MVC"].ls < rows["MVC.lin"].ls


def test_lfi_pipeline_through_the_command_line(tmp_path):
    """Train, query and calibrate the census posterior from the command line.

    Steps:
    - Train on 1000 prior simulations of an 800-species census with 5000 VI iterations
    - Query the posterior at summaries of a census simulated from known parameters,
      with the variance decomposition and the posterior predictive check
    - Calibrate on 200 fresh prior-predictive censuses

    Asserts:
    - A malformed summary vector exits with the input-error code
    - Posterior draws have the five natural-scale parameters with positive variances and rates
    - Every calibration distance is below 0.05
    """
    config = tmp_path / "lfi.yaml"
    config.write_text(
        yaml.safe_dump(
            {
                "seed": 4,
                "fit": {"iterations": 5000, "factors": 3, "seed": 4},
                "lfi": {
                    "n_sims": 1000,
                    "min_sims": 500,
                    "species": 800,
                    "n_test": 200,
                },
            },
        ),
        encoding="utf-8",
    )
    runner = CliRunner()
    base = ["--config", str(config)]
    artifact = tmp_path / "lfi_model.json"

    trained = runner.invoke(cli, [*base, "--out", str(artifact), "lfi-train"])
    assert trained.exit_code == 0, trained.output
    assert (tmp_path / "lfi_model.simulations.csv").exists()

    truth = HyperParams(omega=-3.3, sigma2=1.0, c=0.07, phi1=100.0, phi2=100.0)
    h_obs = summaries(simulate_census(truth, default_census(800, seed=4), np.random.default_rng(0)))
    text = ",".join(f"{v:.17g}" for v in h_obs)

    bad = runner.invoke(cli, [*base, "lfi-posterior", str(artifact), "--summaries", "1,2,3,4"])
    assert bad.exit_code == 2

    out = tmp_path / "posterior.csv"
    queried = runner.invoke(
        cli, [*base, "--out", str(out), "lfi-posterior", str(artifact), "--summaries", text, "--variance-at", "100", "--check"],
    )
    assert queried.exit_code == 0, queried.output
    draws = pd.read_csv(out)
    assert list(draws.columns) == ["omega", "sigma2", "c", "phi1", "phi2"]
    assert len(draws) == 500
    assert (draws[["sigma2", "phi1", "phi2"]] > 0).all().all()
    variance = pd.read_csv(tmp_path / "posterior.variance.csv")
    assert variance["mode"].tolist() == ["point", "posterior"]
    assert (tmp_path / "posterior.check.csv").exists()

    calibrated = runner.invoke(cli, [*base, "calibrate", str(artifact)])
    assert calibrated.exit_code == 0, calibrated.output
    report = pd.read_csv(io.StringIO(calibrated.stdout))
    assert len(report) == 5
    assert (report["distance"] < 0.05).all()
