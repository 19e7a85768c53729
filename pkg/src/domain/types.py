"""Numerical state passed between the services.

These are plain containers; the services own the operations on them.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
import pandas as pd

from src.domain.dto import BasisSpec, FitConfig, PriorSpec
from src.domain.errors import InputError

if TYPE_CHECKING:
    from src.services.margins.base import Margin


@dataclass(frozen=True)
class RawCovariates:
    """Covariates with their standardization parameters (sample mean and sd)."""

    values: np.ndarray
    names: list[str]
    center: np.ndarray
    scale: np.ndarray

    @property
    def standardized(self) -> np.ndarray:
        return (self.values - self.center) / self.scale

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class BasisDescriptor:
    """Everything needed to expand a raw covariate vector into a design row."""

    spec: BasisSpec
    knots: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    names: list[str]
    q: int
    # Raw covariate names, in input column order
    covariates: list[str] = field(default_factory=list)

    @property
    def d(self) -> int:
        return int(self.center.shape[0])


@dataclass(frozen=True)
class DesignMatrix:
    matrix: np.ndarray
    descriptor: BasisDescriptor

    @property
    def q(self) -> int:
        return int(self.matrix.shape[1])


@dataclass(frozen=True)
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    # Within-cluster sum of squares after every Lloyd update
    wss_trace: list[float]
    iterations: int


@dataclass(frozen=True)
class UnpackedState:
    """The augmented state η split into its named blocks."""

    beta: np.ndarray      # p x q, row j is beta_j
    log_xi: np.ndarray    # p x q
    log_tau: np.ndarray   # p
    corr: np.ndarray      # correlation block, prior specific


@dataclass(frozen=True)
class CopulaLayout:
    """Fixed element ordering of the unconstrained state η.

    β (β_1..β_p) comes first, then one horseshoe block per equation
    (log ξ_{j,1..q}, log τ_j), then the correlation block: (v, log σ_v²)
    for prior 1, or (strictly lower entries of G column by column,
    log g_11..log g_KK) for prior 2.
    """

    p: int
    q: int
    prior: int = 1
    factors: int = 1

    def __post_init__(self) -> None:
        if self.p < 1 or self.q < 1:
            raise InputError(f"layout needs p >= 1 and q >= 1, got p={self.p}, q={self.q}")
        if self.prior not in (1, 2):
            raise InputError(f"unknown prior {self.prior}")
        if self.prior == 2 and not 1 <= self.factors <= self.p:
            raise InputError(f"factor count K={self.factors} must lie in 1..p={self.p}")

    @property
    def n_pairs(self) -> int:
        return self.p * (self.p - 1) // 2

    @property
    def factor_entries(self) -> list[tuple[int, int]]:
        """(row, column) of the free strictly-lower entries of G, column-major."""
        return [(i, j) for j in range(self.factors) for i in range(j + 1, self.p)]

    @property
    def corr_size(self) -> int:
        if self.prior == 1:
            return self.n_pairs + 1
        return len(self.factor_entries) + self.factors

    @property
    def beta_slice(self) -> slice:
        return slice(0, self.p * self.q)

    @property
    def horseshoe_slice(self) -> slice:
        start = self.p * self.q
        return slice(start, start + self.p * (self.q + 1))

    @property
    def corr_slice(self) -> slice:
        start = self.horseshoe_slice.stop
        return slice(start, start + self.corr_size)

    @property
    def dim(self) -> int:
        return self.corr_slice.stop

    def unpack(self, eta: np.ndarray) -> UnpackedState:
        eta = np.asarray(eta, dtype=float)
        if eta.shape != (self.dim,):
            raise InputError(f"state has shape {eta.shape}, layout expects ({self.dim},)")
        horseshoe = eta[self.horseshoe_slice].reshape(self.p, self.q + 1)
        return UnpackedState(
            beta=eta[self.beta_slice].reshape(self.p, self.q),
            log_xi=horseshoe[:, : self.q],
            log_tau=horseshoe[:, self.q],
            corr=eta[self.corr_slice],
        )

    def pack(
            self,
            beta: np.ndarray,
            log_xi: np.ndarray,
            log_tau: np.ndarray,
            corr: np.ndarray) -> np.ndarray:
        horseshoe = np.column_stack([np.reshape(log_xi, (self.p, self.q)), np.reshape(log_tau, self.p)])
        corr = np.asarray(corr, dtype=float).ravel()
        if corr.shape[0] != self.corr_size:
            raise InputError(f"correlation block has {corr.shape[0]} entries, expected {self.corr_size}")
        return np.concatenate([np.ravel(beta), horseshoe.ravel(), corr])

    def names(self) -> list[str]:
        """Coordinate index -> parameter name, in layout order."""
        names = [f"beta[{j},{k}]" for j in range(self.p) for k in range(self.q)]
        for j in range(self.p):
            names.extend(f"log_xi[{j},{k}]" for k in range(self.q))
            names.append(f"log_tau[{j}]")
        if self.prior == 1:
            pairs = [(i, j) for j in range(self.p) for i in range(j + 1, self.p)]
            names.extend(f"v[{i},{j}]" for i, j in pairs)
            names.append("log_sigma_v2")
        else:
            names.extend(f"g[{i},{j}]" for i, j in self.factor_entries)
            names.extend(f"log_g[{i},{i}]" for i in range(self.factors))
        return names


@dataclass
class VariationalParams:
    """λ = (μ, B, δ) of the factor Gaussian q_λ(η) = N(μ, BBᵀ + Δ²)."""

    mu: np.ndarray
    loadings: np.ndarray
    delta: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.mu.shape[0])

    @property
    def factors(self) -> int:
        return int(self.loadings.shape[1])

    def copy(self) -> VariationalParams:
        return VariationalParams(self.mu.copy(), self.loadings.copy(), self.delta.copy())


@dataclass
class FitTrace:
    elbo: np.ndarray
    smoothed: np.ndarray
    wall_clock_ms: int
    final: VariationalParams
    rejected_draws: int = 0
    log_likelihood: float | None = None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "iteration": np.arange(1, self.elbo.shape[0] + 1),
                "elbo": self.elbo,
                "smoothed_elbo": self.smoothed,
            },
        )


@dataclass(frozen=True)
class FittedModel:
    """A fitted regression copula ready for prediction."""

    params: VariationalParams
    layout: CopulaLayout
    basis: BasisDescriptor
    margins: list[Margin]
    response_names: list[str]
    prior: PriorSpec
    fit_config: FitConfig

    @property
    def p(self) -> int:
        return self.layout.p


@dataclass(frozen=True)
class PredictiveBatch:
    samples: np.ndarray
    x_new: np.ndarray
    seed: int | None

    def to_frame(self, names: list[str]) -> pd.DataFrame:
        return pd.DataFrame(self.samples, columns=names)


@dataclass
class ScoreRow:
    model: str
    crps: float
    ls: float
    rmse: float
    failed: bool = False
    wall_clock_ms: int = 0


@dataclass
class ScoreTable:
    rows: list[ScoreRow]
    folds: list[ScoreRow]
    fold_ids: np.ndarray
    seed: int
    fold_labels: list[tuple[str, int]] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {"model": r.model, "CRPS": r.crps, "LS": r.ls, "RMSE": r.rmse, "failed": r.failed}
                for r in self.rows
            ],
        )

    def folds_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "model": r.model,
                    "fold": fold,
                    "CRPS": r.crps,
                    "LS": r.ls,
                    "RMSE": r.rmse,
                    "failed": r.failed,
                    "wall_clock_ms": r.wall_clock_ms,
                }
                for r, (_, fold) in zip(self.folds, self.fold_labels, strict=True)
            ],
        )


@dataclass(frozen=True)
class SynthDataset:
    responses: np.ndarray
    covariates: np.ndarray
    z: np.ndarray
    response_names: list[str]
    covariate_names: list[str]
    sigma: np.ndarray
    beta: np.ndarray
    log_xi: np.ndarray
    basis: BasisDescriptor

    def to_frame(self) -> pd.DataFrame:
        data = np.column_stack([self.responses, self.covariates])
        return pd.DataFrame(data, columns=[*self.response_names, *self.covariate_names])


@dataclass(frozen=True)
class HyperParams:
    """ψ = (Ω, σ², c, φ1, φ2) of the growth/mortality hierarchy."""

    omega: float
    sigma2: float
    c: float
    phi1: float
    phi2: float

    def __post_init__(self) -> None:
        if self.sigma2 <= 0 or self.phi1 <= 0 or self.phi2 <= 0:
            raise InputError(f"sigma2, phi1 and phi2 must be positive: {self}")

    def to_response(self) -> np.ndarray:
        """Regression response scale: (Ω, log σ², c, log φ1, log φ2)."""
        return np.array([self.omega, np.log(self.sigma2), self.c, np.log(self.phi1), np.log(self.phi2)])

    @classmethod
    def from_response(cls, y: np.ndarray) -> HyperParams:
        return cls(
            omega=float(y[0]),
            sigma2=float(np.exp(y[1])),
            c=float(y[2]),
            phi1=float(np.exp(y[3])),
            phi2=float(np.exp(y[4])),
        )


@dataclass(frozen=True)
class CensusDesign:
    """Frozen initial abundances and interval durations the simulator runs on."""

    n_init: np.ndarray
    duration: np.ndarray

    def __post_init__(self) -> None:
        if self.n_init.shape != self.duration.shape or self.n_init.ndim != 1:
            raise InputError("abundances and durations must be vectors of equal length")
        if np.any(self.n_init < 0):
            raise InputError("initial abundances must be non-negative")
        if np.any(self.duration <= 0):
            raise InputError("interval durations must be positive")

    @property
    def species(self) -> int:
        return int(self.n_init.shape[0])


@dataclass(frozen=True)
class CensusData:
    """One census interval: initial abundance, survivors and recruits per species."""

    n_init: np.ndarray
    survivors: np.ndarray
    recruits: np.ndarray
    duration: np.ndarray
    # Latent rates, kept for oracle checks
    growth: np.ndarray | None = None
    mortality: np.ndarray | None = None

    @property
    def n_next(self) -> np.ndarray:
        return self.survivors + self.recruits

    @property
    def species(self) -> int:
        return int(self.n_init.shape[0])


@dataclass(frozen=True)
class DemographicVariance:
    env_variance: np.ndarray
    demo_variance: np.ndarray
    variance: np.ndarray

    def summary(self) -> dict[str, float]:
        return {
            "v_e": float(np.mean(self.env_variance)),
            "v_d": float(np.mean(self.demo_variance)),
            "variance": float(np.mean(self.variance)),
            "variance_q05": float(np.quantile(self.variance, 0.05)),
            "variance_q95": float(np.quantile(self.variance, 0.95)),
        }


@dataclass(frozen=True)
class SimulationTable:
    """Prior draws of ψ on the response scale next to their census summaries."""

    responses: np.ndarray
    summaries: np.ndarray
    response_names: list[str]
    summary_names: list[str]
    dropped: int = 0

    @property
    def n(self) -> int:
        return int(self.responses.shape[0])

    def to_frame(self) -> pd.DataFrame:
        data = np.column_stack([self.responses, self.summaries])
        return pd.DataFrame(data, columns=[*self.response_names, *self.summary_names])


@dataclass(frozen=True)
class CalibrationReport:
    """Sup-distance between the average posterior CDF and the prior CDF, per parameter."""

    distances: dict[str, float]
    curves: pd.DataFrame
    n_test: int

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"parameter": list(self.distances), "distance": list(self.distances.values())},
        )
