"""Five summary statistics of one census interval."""
from __future__ import annotations

import numpy as np
from scipy.stats import iqr

from src.domain.errors import InputError
from src.domain.types import CensusData

SUMMARY_NAMES = ["variance_scaling", "survival", "recruitment", "survival_iqr", "recruitment_iqr"]

MIN_SPECIES = 50
ABUNDANCE_BINS = 10
# Species needed for a per-species rate to enter the spread statistics
MIN_RATE_ABUNDANCE = 5


def variance_scaling_exponent(n_init: np.ndarray, change: np.ndarray, bins: int = ABUNDANCE_BINS) -> float:
    """Slope of log Var(ΔN) on log mean N over equal-count abundance bins.

    Bins whose ΔN variance is zero are dropped.
    """
    order = np.argsort(n_init, kind="stable")
    log_means, log_vars = [], []
    for idx in np.array_split(order, bins):
        if idx.size < 2:
            continue
        var = np.var(change[idx])
        if var > 0:
            log_means.append(np.log(np.mean(n_init[idx])))
            log_vars.append(np.log(var))
    if len(log_means) < 2 or np.ptp(log_means) == 0:
        raise InputError("too few abundance bins with varying change to estimate the variance scaling")
    slope, _ = np.polyfit(log_means, log_vars, 1)
    return float(slope)


def summaries(data: CensusData) -> np.ndarray:
    """H = (variance scaling exponent, pooled survival, pooled recruitment rate,
    IQR of per-species survival, IQR of per-species recruitment rate).

    Only species present at the start of the interval enter.

    Raises:
        InputError: fewer than 50 species with N > 0

    """
    present = data.n_init > 0
    if int(present.sum()) < MIN_SPECIES:
        raise InputError(f"summaries need at least {MIN_SPECIES} species with N > 0, got {int(present.sum())}")

    n = data.n_init[present].astype(float)
    s = data.survivors[present].astype(float)
    a = data.recruits[present].astype(float)
    dt = data.duration[present]

    h1 = variance_scaling_exponent(n, s + a - n)
    h2 = s.sum() / n.sum()
    h3 = a.sum() / np.sum(n * dt)

    common = n >= MIN_RATE_ABUNDANCE
    if not np.any(common):
        raise InputError(f"no species with N >= {MIN_RATE_ABUNDANCE} for the spread statistics")
    h4 = iqr(s[common] / n[common])
    h5 = iqr(a[common] / (n[common] * dt[common]))
    return np.array([h1, h2, h3, h4, h5], dtype=float)
