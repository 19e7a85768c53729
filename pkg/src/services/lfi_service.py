"""Amortized likelihood-free inference for the census hierarchy.

The regression copula is fitted once on prior simulations with ψ as the
response and the census summaries as covariates; the posterior for an
observed census is then a predictive draw at its summaries.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pandas as pd
from tqdm import tqdm

from src.domain.dto import FitConfig, LfiSpec, PriorSpec
from src.domain.errors import InputError, NumericalError
from src.domain.types import (
    CalibrationReport,
    CensusDesign,
    DemographicVariance,
    FitTrace,
    FittedModel,
    HyperParams,
    SimulationTable,
)
from src.metrics.metrics import observe_simulation_batch
from src.services.lfi.simulator import (
    C_LOC,
    C_SCALE,
    OMEGA_LOC,
    OMEGA_SCALE,
    PHI_SCALE,
    PHI_SHAPE,
    SIGMA2_SCALE,
    SIGMA2_SHAPE,
    sample_ald,
    sample_hyperpriors,
    sample_trunc_lognormal,
    simulate_census,
)
from src.services.lfi.summaries import SUMMARY_NAMES, summaries
from src.services.margins.base import Margin
from src.services.margins.parametric_margin import LogInverseGammaMargin, NormalMargin
from src.services.predict_service import PredictService, calibration_curve, empirical_cdf_matrix
from src.services.regression_service import RegressionService

logger = logging.getLogger(__name__)

RESPONSE_NAMES = ["omega", "log_sigma2", "c", "log_phi1", "log_phi2"]
NATURAL_NAMES = ["omega", "sigma2", "c", "phi1", "phi2"]
# Response columns stored on the log scale
LOG_COLUMNS = [1, 3, 4]
CALIBRATION_GRID = 200


def prior_margins() -> list[Margin]:
    """Closed-form prior margins of the transformed parameters."""
    return [
        NormalMargin({"loc": OMEGA_LOC, "scale": OMEGA_SCALE}),
        LogInverseGammaMargin({"shape": SIGMA2_SHAPE, "scale": SIGMA2_SCALE}),
        NormalMargin({"loc": C_LOC, "scale": C_SCALE}),
        LogInverseGammaMargin({"shape": PHI_SHAPE, "scale": PHI_SCALE}),
        LogInverseGammaMargin({"shape": PHI_SHAPE, "scale": PHI_SCALE}),
    ]


def to_natural(responses: np.ndarray) -> np.ndarray:
    """(Ω, log σ², c, log φ1, log φ2) rows back to (Ω, σ², c, φ1, φ2)."""
    out = np.array(responses, dtype=float, copy=True)
    out[..., LOG_COLUMNS] = np.exp(out[..., LOG_COLUMNS])
    return out


def abundance_variance(n: float, duration: float, env_variance, demo_variance):
    """Var(N_next | N) ≈ N²ΔT²·v_e + NΔT·v_d."""
    return n * n * duration * duration * env_variance + n * duration * demo_variance


def _simulate_one(psi: HyperParams, design: CensusDesign, rng: np.random.Generator) -> np.ndarray | None:
    try:
        h = summaries(simulate_census(psi, design, rng))
    except (InputError, NumericalError) as e:
        logger.debug("Dropped simulation for %s: %s", psi, e)
        return None
    return h if np.all(np.isfinite(h)) else None


class LfiService:
    """Simulation, training, posterior and calibration for the census model.

    Args:
        regression (RegressionService): fits the amortized regression copula
        threads (int): workers for independent simulations
        show_progress (bool): display a tqdm progress bar over simulations

    """

    def __init__(
            self,
            regression: RegressionService | None = None,
            threads: int = 1,
            show_progress: bool = False) -> None:
        self.regression = regression or RegressionService()
        self.threads = max(1, threads)
        self.show_progress = show_progress

    def _run(self, tasks: list[tuple[HyperParams, np.random.Generator]], design: CensusDesign, desc: str):
        """Summaries for every (ψ, rng) task, in task order."""
        def job(task):
            return _simulate_one(task[0], design, task[1])

        if self.threads > 1:
            with ThreadPoolExecutor(self.threads) as executor:
                return list(tqdm(executor.map(job, tasks), total=len(tasks), desc=desc, disable=not self.show_progress))
        return [job(t) for t in tqdm(tasks, desc=desc, disable=not self.show_progress)]

    def simulate_training_set(self, n_sims: int, design: CensusDesign, seed: int) -> SimulationTable:
        """Prior draws ψ_r with the summaries of one simulated census each.

        Simulation r uses its own stream seeded by (seed, r), so the table
        does not depend on the thread count. Simulations with failing or
        non-finite summaries are dropped and counted.
        """
        start = time.perf_counter()
        tasks = []
        for r in range(n_sims):
            rng = np.random.default_rng([seed, r])
            tasks.append((sample_hyperpriors(rng), rng))

        results = self._run(tasks, design, "simulations")
        kept = [(psi, h) for (psi, _), h in zip(tasks, results, strict=True) if h is not None]
        dropped = n_sims - len(kept)

        elapsed_ms = int((time.perf_counter() - start) * 1000)
        observe_simulation_batch(elapsed_ms, dropped)
        if dropped:
            logger.warning("Dropped %d of %d simulations with unusable summaries", dropped, n_sims)
        logger.info("Simulated %d census datasets in %d ms", len(kept), elapsed_ms)

        if not kept:
            raise NumericalError("every simulation failed")
        return SimulationTable(
            responses=np.array([psi.to_response() for psi, _ in kept]),
            summaries=np.array([h for _, h in kept]),
            response_names=list(RESPONSE_NAMES),
            summary_names=list(SUMMARY_NAMES),
            dropped=dropped,
        )

    def train(
            self,
            spec: LfiSpec,
            design: CensusDesign,
            fit_config: FitConfig,
            prior: PriorSpec | None = None,
            seed: int = 0) -> tuple[FittedModel, FitTrace, SimulationTable]:
        """Fit the amortized posterior: ψ regressed on the census summaries.

        Raises:
            InputError: fewer simulations than `spec.min_sims` requested or kept

        """
        if spec.n_sims < spec.min_sims:
            raise InputError(f"LFI training needs at least {spec.min_sims} simulations, got {spec.n_sims}")
        table = self.simulate_training_set(spec.n_sims, design, seed)
        if table.n < spec.min_sims:
            raise InputError(f"only {table.n} usable simulations, at least {spec.min_sims} required")

        model, trace, _ = self.regression.fit(
            table.responses,
            table.summaries,
            spec.basis,
            prior or PriorSpec(),
            fit_config,
            response_names=list(RESPONSE_NAMES),
            covariate_names=list(SUMMARY_NAMES),
            margins=prior_margins(),
        )
        return model, trace, table

    @staticmethod
    def posterior(model: FittedModel, h_obs: np.ndarray, m: int, seed: int | None = 0, gauss_hermite_order: int = 64) -> np.ndarray:
        """m joint posterior draws of (Ω, σ², c, φ1, φ2) given observed summaries."""
        h_obs = np.asarray(h_obs, dtype=float)
        if h_obs.shape != (len(SUMMARY_NAMES),):
            raise InputError(f"observed summaries must have {len(SUMMARY_NAMES)} entries, got shape {h_obs.shape}")
        batch = PredictService(model, gauss_hermite_order).predictive_sample(h_obs, m, seed)
        return to_natural(batch.samples)

    @staticmethod
    def point_estimate(draws: np.ndarray) -> HyperParams:
        """Component-wise posterior median."""
        median = np.median(np.atleast_2d(draws), axis=0)
        return HyperParams(*(float(v) for v in median))

    @staticmethod
    def demographic_variance(
            psi: HyperParams | list[HyperParams],
            n: float,
            duration: float,
            inner_draws: int = 10000,
            seed: int = 0) -> DemographicVariance:
        """Environmental and demographic variance of the growth/mortality hierarchy.

        For each ψ, v_e = Var(ρ) and v_d = E(ρ) + 2E(μ) are estimated from
        `inner_draws` joint draws of (ρ, μ); a single ψ gives the plug-in value.
        """
        if n < 0 or duration <= 0:
            raise InputError(f"need N >= 0 and dT > 0, got N={n}, dT={duration}")
        draws = [psi] if isinstance(psi, HyperParams) else list(psi)
        env = np.empty(len(draws))
        demo = np.empty(len(draws))
        for k, hp in enumerate(draws):
            rng = np.random.default_rng([seed, k])
            rho = sample_ald(hp.c, hp.phi1, hp.phi2, rng, size=inner_draws)
            mu = sample_trunc_lognormal(hp.omega, hp.sigma2, -rho, rng)
            env[k] = np.var(rho, ddof=1)
            demo[k] = np.mean(rho) + 2.0 * np.mean(mu)
        return DemographicVariance(
            env_variance=env,
            demo_variance=demo,
            variance=abundance_variance(n, duration, env, demo),
        )

    def posterior_predictive_summaries(self, draws: np.ndarray, design: CensusDesign, seed: int = 0) -> np.ndarray:
        """Summaries of censuses simulated from posterior draws, failures dropped."""
        tasks = []
        for k, row in enumerate(np.atleast_2d(draws)):
            tasks.append((HyperParams(*(float(v) for v in row)), np.random.default_rng([seed, k])))
        results = [h for h in self._run(tasks, design, "posterior predictive") if h is not None]
        if len(results) < len(tasks):
            logger.warning("Dropped %d posterior predictive simulations", len(tasks) - len(results))
        return np.array(results).reshape(-1, len(SUMMARY_NAMES))

    def calibrate(
            self,
            model: FittedModel,
            design: CensusDesign,
            n_test: int,
            posterior_draws: int,
            seed: int = 0,
            grid_size: int = CALIBRATION_GRID) -> CalibrationReport:
        """Compare the average estimated posterior with the prior on fresh prior-predictive data.

        Test census t is simulated from its own (seed, 1, t) stream, so the
        test set never shares draws with a training set of the same seed.
        """
        tasks = []
        for t in range(n_test):
            rng = np.random.default_rng([seed, 1, t])
            tasks.append((sample_hyperpriors(rng), rng))
        observed = [h for h in self._run(tasks, design, "calibration") if h is not None]
        if not observed:
            raise NumericalError("every calibration simulation failed")

        predictor = PredictService(model)
        samples = np.stack(
            [predictor.predictive_sample(h, posterior_draws, seed + t).samples for t, h in enumerate(observed)],
        )

        distances: dict[str, float] = {}
        curves = []
        for j, (name, margin) in enumerate(zip(model.response_names, model.margins, strict=True)):
            grid = margin.quantile(np.linspace(0.001, 0.999, grid_size))
            average, reference = calibration_curve(empirical_cdf_matrix(samples[:, :, j], grid), margin.cdf(grid))
            distances[name] = float(np.max(np.abs(average - reference)))
            curves.append(pd.DataFrame({"parameter": name, "y": grid, "average_cdf": average, "prior_cdf": reference}))
            logger.info("Calibration distance for %s: %.4f", name, distances[name])

        return CalibrationReport(distances=distances, curves=pd.concat(curves, ignore_index=True), n_test=len(observed))
