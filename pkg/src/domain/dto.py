from __future__ import annotations

from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class StrictModel(BaseModel):
    """Base DTO for the run configuration. Unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid")


class BasisSpec(StrictModel):
    """Covariate basis expansion settings.

    `tps` is the multivariate cubic thin plate basis over k-means knots,
    `additive` uses univariate radial terms per covariate and `linear`
    keeps the standardized covariates only.
    """

    kind: Literal["tps", "additive", "linear"] = "tps"
    knots: int = Field(30, ge=1)
    degree: int = Field(2, ge=1)
    radial_exponent: float = Field(3.0, gt=0)
    seed: int = 0
    max_iter: int = Field(300, ge=1)


class PriorSpec(StrictModel):
    """Prior for the cross-equation correlation matrix."""

    kind: Literal[1, 2] = 1
    # Factor count K, only read by prior 2
    factors: int = Field(1, ge=1)
    sigma_v_shape: float = Field(0.001, gt=0)
    sigma_v_scale: float = Field(0.001, gt=0)
    gdp_shape: float = Field(3.0, gt=0)
    gdp_scale: float = Field(1.0, gt=0)


class FitConfig(StrictModel):
    """Variational fit settings. Defaults follow the 30,000 iteration, K = 1, M = 10 setup."""

    iterations: int = Field(30000, ge=1)
    draws: int = Field(1, ge=1)
    factors: int = Field(10, ge=1)
    decay: float = Field(0.95, gt=0, lt=1)
    damping: float = Field(1e-6, gt=0)
    seed: int = 0
    elbo_window: int = Field(100, ge=1)
    early_stop: bool = False
    early_stop_span: int = Field(1000, ge=1)
    early_stop_tol: float = Field(1e-4, ge=0)
    clip_norm: float = Field(1e4, gt=0)
    max_rejections: int = Field(10, ge=1)
    init_ridge: float = Field(1.0, gt=0)
    init_delta: float = Field(0.1, gt=0)
    init_loading_sd: float = Field(0.01, ge=0)
    # L-BFGS-B climb of log h before the stochastic phase, 0 disables it
    mode_search_iterations: int = Field(2000, ge=0)
    log_scale_bounds: tuple[float, float] = (-8.0, 6.0)

    @field_validator("log_scale_bounds")
    @classmethod
    def _check_scale_bounds(cls, value: tuple[float, float]) -> tuple[float, float]:
        if not value[0] < value[1]:
            raise ValueError("log_scale_bounds must be an increasing pair")
        return value


class MarginSpec(StrictModel):
    """Declared margin for one response.

    `kde` is estimated from the data within [lower, upper]; the other
    families are closed form with their parameters in `params`.
    """

    family: Literal["kde", "normal", "lognormal", "exponential", "log_inverse_gamma"] = "kde"
    lower: float | None = None
    upper: float | None = None
    params: dict[str, float] = Field(default_factory=dict)

    @property
    def bounds(self) -> tuple[float, float]:
        lower = -np.inf if self.lower is None else float(self.lower)
        upper = np.inf if self.upper is None else float(self.upper)
        return lower, upper

    @model_validator(mode="after")
    def _check_bounds(self) -> MarginSpec:
        lower, upper = self.bounds
        if not lower < upper:
            raise ValueError(f"margin lower bound {lower} must be below upper bound {upper}")
        return self


class DataSpec(StrictModel):
    """CSV input: p response columns then d covariate columns."""

    path: str | None = None
    responses: list[str] = Field(default_factory=list)
    covariates: list[str] = Field(default_factory=list)


class PredictSpec(StrictModel):
    """Prediction defaults; unset sizes fall back to the process settings."""

    samples: int | None = Field(None, ge=1)
    mode: Literal["plugin", "mc"] = "plugin"
    mc_draws: int = Field(200, ge=1)
    gauss_hermite_order: int | None = Field(None, ge=2)
    # Weights of the linear functional wᵀY drawn by `predict --functional`
    weights: list[float] | None = None


class ModelSpec(StrictModel):
    """One benchmark contender."""

    name: str
    kind: Literal["mvc", "noc"] = "mvc"
    basis: BasisSpec = Field(default_factory=BasisSpec)
    prior: PriorSpec = Field(default_factory=PriorSpec)


def default_benchmark_models() -> list[ModelSpec]:
    """MVC variants with the TPS, additive and linear bases under both priors, plus NOC."""
    models: list[ModelSpec] = []
    for label, kind in (("MVC", "tps"), ("MVC.add", "additive"), ("MVC.lin", "linear")):
        for prior in (1, 2):
            models.append(
                ModelSpec(
                    name=f"{label}.prior{prior}",
                    basis=BasisSpec(kind=kind),
                    prior=PriorSpec(kind=prior),
                ),
            )
    models.append(ModelSpec(name="NOC", kind="noc"))
    return models


class BenchmarkSpec(StrictModel):
    folds: int = Field(10, ge=2)
    models: list[ModelSpec] = Field(default_factory=default_benchmark_models)
    samples_per_row: int = Field(200, ge=2)
    weights: list[float] | None = None
    # Optional fit override so cross-validation can run on a smaller budget
    fit: FitConfig | None = None


class SynthSpec(StrictModel):
    """Synthetic data drawn from the copula model's own generative law."""

    n: int = Field(2000, ge=2)
    p: int = Field(3, ge=1)
    d: int = Field(2, ge=1)
    basis: BasisSpec = Field(default_factory=lambda: BasisSpec(knots=5))
    sigma: list[list[float]] | None = None
    beta: list[list[float]] | None = None
    xi_scale: float = Field(1.0, gt=0)
    margins: list[MarginSpec] | None = None
    seed: int = 0

    def sigma_matrix(self) -> np.ndarray:
        if self.sigma is None:
            return np.eye(self.p)
        return np.asarray(self.sigma, dtype=float)

    @field_validator("sigma")
    @classmethod
    def _check_sigma(cls, value: list[list[float]] | None) -> list[list[float]] | None:
        if value is None:
            return value
        arr = np.asarray(value, dtype=float)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError("sigma must be a square matrix")
        if not np.allclose(arr, arr.T) or not np.allclose(np.diag(arr), 1.0):
            raise ValueError("sigma must be a symmetric matrix with unit diagonal")
        if np.linalg.eigvalsh(arr).min() <= 0:
            raise ValueError("sigma must be positive definite")
        return value

    @model_validator(mode="after")
    def _check_shapes(self) -> SynthSpec:
        if self.sigma is not None and len(self.sigma) != self.p:
            raise ValueError(f"sigma must be {self.p}x{self.p}")
        if self.margins is not None and len(self.margins) != self.p:
            raise ValueError(f"expected {self.p} margins, got {len(self.margins)}")
        return self


class LfiSpec(StrictModel):
    """Likelihood-free inference pipeline settings for the census model."""

    n_sims: int = Field(5000, ge=1)
    species: int = Field(800, ge=1)
    median_abundance: int = Field(8, ge=1)
    duration: float = Field(5.0, gt=0)
    census_file: str | None = None
    n_test: int = Field(200, ge=1)
    posterior_draws: int = Field(500, ge=1)
    inner_draws: int = Field(10000, ge=1)
    min_sims: int = Field(500, ge=1)
    basis: BasisSpec = Field(default_factory=lambda: BasisSpec(knots=50))


class RunConfig(StrictModel):
    """Root of the YAML run configuration."""

    seed: int = 0
    data: DataSpec = Field(default_factory=DataSpec)
    basis: BasisSpec = Field(default_factory=BasisSpec)
    prior: PriorSpec = Field(default_factory=PriorSpec)
    fit: FitConfig = Field(default_factory=FitConfig)
    margins: dict[str, MarginSpec] = Field(default_factory=dict)
    predict: PredictSpec = Field(default_factory=PredictSpec)
    benchmark: BenchmarkSpec = Field(default_factory=BenchmarkSpec)
    synth: SynthSpec = Field(default_factory=SynthSpec)
    lfi: LfiSpec = Field(default_factory=LfiSpec)
