"""Tree census simulator: species-level growth and mortality rates drawn from a
hierarchy, then binomial survival and Poisson recruitment over one interval.
"""
from __future__ import annotations

import logging

import numpy as np
from scipy.stats import invgamma, logser, norm

from src.domain.errors import InputError, SamplingError
from src.domain.types import CensusData, CensusDesign, HyperParams

logger = logging.getLogger(__name__)

# Hyperprior constants
OMEGA_LOC, OMEGA_SCALE = -3.3, 1.2
C_LOC, C_SCALE = 0.07, 0.08
SIGMA2_SHAPE, SIGMA2_SCALE = 2.0, 1.0
PHI_SHAPE, PHI_SCALE = 3.0, 200.0

# Smallest admissible mass above the truncation point
MIN_TRUNCATION_MASS = 1e-14


def sample_hyperpriors(rng: np.random.Generator) -> HyperParams:
    """ψ with Ω ~ N(−3.3, 1.2²), c ~ N(0.07, 0.08²), σ² ~ IG(2, 1) and φ1, φ2 ~ IG(3, 200)."""
    omega = norm.rvs(OMEGA_LOC, OMEGA_SCALE, random_state=rng)
    c = norm.rvs(C_LOC, C_SCALE, random_state=rng)
    sigma2 = invgamma.rvs(SIGMA2_SHAPE, scale=SIGMA2_SCALE, random_state=rng)
    phi1, phi2 = invgamma.rvs(PHI_SHAPE, scale=PHI_SCALE, size=2, random_state=rng)
    return HyperParams(omega=float(omega), sigma2=float(sigma2), c=float(c), phi1=float(phi1), phi2=float(phi2))


def ald_logpdf(x: np.ndarray | float, c: float, phi1: float, phi2: float) -> np.ndarray:
    """Two-piece exponential density with mode c, rate φ1 right of c and φ2 left of it."""
    x = np.asarray(x, dtype=float)
    log_k = np.log(phi1) + np.log(phi2) - np.log(phi1 + phi2)
    return np.where(x >= c, log_k - phi1 * (x - c), log_k + phi2 * (x - c))


def sample_ald(
        c: float,
        phi1: float,
        phi2: float,
        rng: np.random.Generator,
        size: int | tuple[int, ...] | None = None) -> np.ndarray | float:
    """Exact mixture draw: c − Exp(φ2) with probability φ1/(φ1+φ2), else c + Exp(φ1)."""
    if phi1 <= 0 or phi2 <= 0:
        raise InputError(f"ALD rates must be positive, got phi1={phi1}, phi2={phi2}")
    left = rng.uniform(size=size) < phi1 / (phi1 + phi2)
    magnitude = rng.standard_exponential(size=size)
    out = np.where(left, c - magnitude / phi2, c + magnitude / phi1)
    return float(out) if size is None else out


def sample_trunc_lognormal(
        omega: float,
        sigma2: float,
        lower: np.ndarray | float,
        rng: np.random.Generator) -> np.ndarray | float:
    """LN(Ω, σ²) conditioned on exceeding `lower`, by inverting the conditional CDF.

    Non-positive bounds are inactive and give a plain lognormal draw.

    Raises:
        SamplingError: the mass above an active bound is numerically zero

    """
    if sigma2 <= 0:
        raise InputError(f"lognormal variance must be positive, got {sigma2}")
    scalar = np.ndim(lower) == 0
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    sigma = np.sqrt(sigma2)

    z = rng.standard_normal(lower.shape)
    u = 1.0 - rng.uniform(size=lower.shape)

    active = lower > 0
    if np.any(active):
        a = (np.log(lower[active]) - omega) / sigma
        mass = norm.sf(a)
        if np.any(mass <= MIN_TRUNCATION_MASS):
            worst = int(np.argmin(mass))
            raise SamplingError(
                f"truncation mass vanishes: lower={lower[active][worst]:.6g}, "
                f"Omega={omega:.6g}, sigma2={sigma2:.6g}, mass={mass[worst]:.3g}",
            )
        z[active] = norm.isf(u[active] * mass)

    draws = np.exp(omega + sigma * z)
    return float(draws[0]) if scalar else draws


def simulate_census(
        psi: HyperParams,
        design: CensusDesign,
        rng: np.random.Generator,
        fixed_mortality: np.ndarray | float | None = None,
        fixed_growth: np.ndarray | float | None = None) -> CensusData:
    """Simulate survivors and recruits for every species over one census interval.

    ρ ~ ALD(c, φ1, φ2), μ ~ LN(Ω, σ²) truncated to μ > −ρ, S ~ Bin(N, e^{−μΔT})
    and A ~ Poisson(N(e^{ρΔT} − e^{−μΔT})). The fixed rate arguments replace
    the hierarchy draws for the corresponding rate.

    Raises:
        SamplingError: truncation mass or Poisson mean out of range

    """
    n = design.n_init.astype(np.int64)
    dt = design.duration
    shape = n.shape

    if fixed_growth is None:
        rho = sample_ald(psi.c, psi.phi1, psi.phi2, rng, size=shape)
    else:
        rho = np.broadcast_to(np.asarray(fixed_growth, dtype=float), shape).copy()
    if fixed_mortality is None:
        mu = sample_trunc_lognormal(psi.omega, psi.sigma2, -rho, rng)
    else:
        mu = np.broadcast_to(np.asarray(fixed_mortality, dtype=float), shape).copy()

    survival = np.exp(-mu * dt)
    # Truncation keeps this non-negative; the clip only matters for fixed rates
    recruit_mean = np.maximum(n * (np.exp(rho * dt) - survival), 0.0)
    try:
        survivors = rng.binomial(n, survival)
        recruits = rng.poisson(recruit_mean)
    except ValueError as e:
        raise SamplingError(f"census draw failed for {psi}: {e}") from e

    return CensusData(
        n_init=n,
        survivors=survivors,
        recruits=recruits,
        duration=dt,
        growth=rho,
        mortality=mu,
    )


def logseries_parameter(median: int) -> float:
    """Fisher log-series parameter whose median abundance equals `median`."""
    if median < 1:
        raise InputError(f"median abundance must be positive, got {median}")
    if median == 1:
        return 0.5
    lo, hi = 0.0, 1.0 - 1e-15
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        # Median reaches `median` once the mass below it falls under one half
        if logser.cdf(median - 1, mid) >= 0.5:
            lo = mid
        else:
            hi = mid
    return hi


def default_census(species: int = 800, median_abundance: int = 8, duration: float = 5.0, seed: int = 0) -> CensusDesign:
    """Synthetic census design: log-series abundances with the given median, one common interval."""
    p = logseries_parameter(median_abundance)
    n_init = logser.rvs(p, size=species, random_state=np.random.default_rng(seed)).astype(np.int64)
    logger.info(
        "Built synthetic census: %d species, log-series p=%.6f, median N=%d",
        species, p, int(np.median(n_init)),
    )
    return CensusDesign(n_init=n_init, duration=np.full(species, float(duration)))
