"""Proper scoring rules for sample-based and density forecasts. Lower is better throughout."""
from __future__ import annotations

import numpy as np

from src.domain.errors import InputError, ScoreError


def crps_sample(samples: np.ndarray, y: float) -> float:
    """CRPS of a sample forecast: mean|X − y| − ½·mean|X − X′|.

    The second term uses the sorted form (1/m²)·Σ_i (2i − m − 1)·x_(i).
    """
    x = np.asarray(samples, dtype=float).ravel()
    m = x.shape[0]
    if m < 2:
        raise InputError(f"CRPS needs at least 2 samples, got {m}")
    x = np.sort(x)
    spread = np.sum((2.0 * np.arange(1, m + 1) - m - 1.0) * x) / (m * m)
    return float(np.mean(np.abs(x - y)) - spread)


def crps_sample_naive(samples: np.ndarray, y: float) -> float:
    """O(m²) reference of `crps_sample`."""
    x = np.asarray(samples, dtype=float).ravel()
    return float(np.mean(np.abs(x - y)) - 0.5 * np.mean(np.abs(x[:, None] - x[None, :])))


def log_score(density: np.ndarray | float) -> np.ndarray | float:
    """−log of the predictive density at the observation.

    Raises:
        ScoreError: a density value is zero, negative or not finite

    """
    density = np.asarray(density, dtype=float)
    if np.any(~np.isfinite(density)) or np.any(density <= 0):
        raise ScoreError("log score needs strictly positive finite density values")
    out = -np.log(density)
    return float(out) if out.ndim == 0 else out


def log_score_from_log(log_density: np.ndarray | float) -> np.ndarray | float:
    """Same as `log_score` for values already on the log scale."""
    log_density = np.asarray(log_density, dtype=float)
    if np.any(np.isnan(log_density)) or np.any(np.isinf(log_density)):
        raise ScoreError("log score needs strictly positive finite density values")
    out = -log_density
    return float(out) if out.ndim == 0 else out


def rmse(predictions: np.ndarray, truths: np.ndarray) -> float:
    predictions = np.asarray(predictions, dtype=float)
    truths = np.asarray(truths, dtype=float)
    if predictions.shape != truths.shape:
        raise InputError(f"predictions {predictions.shape} and truths {truths.shape} differ in shape")
    return float(np.sqrt(np.mean((predictions - truths) ** 2)))
