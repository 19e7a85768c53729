from __future__ import annotations

from abc import ABC, abstractmethod
from typing import Any

import numpy as np
from scipy.special import ndtr, ndtri

from src.domain.errors import InputError

# Clamp applied to u before the normal quantile
EPS = 1e-12
Z_MIN = float(ndtri(EPS))
Z_MAX = -Z_MIN


class Margin(ABC):
    """Invariant marginal distribution G_j of one response.

    Implementations must be immutable after construction so that they can be
    shared between threads.
    """

    family: str = ""

    def __init__(self, lower: float = -np.inf, upper: float = np.inf) -> None:
        if not lower < upper:
            raise InputError(f"margin lower bound {lower} must be below upper bound {upper}")
        self.lower = float(lower)
        self.upper = float(upper)

    @property
    def bounds(self) -> tuple[float, float]:
        return self.lower, self.upper

    @abstractmethod
    def cdf(self, y: np.ndarray | float) -> np.ndarray:
        ...

    @abstractmethod
    def pdf(self, y: np.ndarray | float) -> np.ndarray:
        ...

    @abstractmethod
    def _quantile(self, u: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def to_dict(self) -> dict[str, Any]:
        ...

    def logpdf(self, y: np.ndarray | float) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.pdf(y))

    def quantile(self, u: np.ndarray | float) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if np.any(~np.isfinite(u)) or np.any((u < 0) | (u > 1)):
            raise InputError("quantile levels must lie in [0, 1]")
        return self._quantile(u)

    def to_z(self, y: np.ndarray | float) -> np.ndarray:
        """Normal scores Φ⁻¹(G(y)) with G clamped to [ε, 1 − ε]."""
        return ndtri(np.clip(self.cdf(y), EPS, 1.0 - EPS))

    def from_z(self, z: np.ndarray | float) -> np.ndarray:
        """Inverse of to_z: G⁻¹(Φ(z))."""
        return self._quantile(np.clip(ndtr(np.asarray(z, dtype=float)), 0.0, 1.0))

    def in_support(self, y: np.ndarray | float) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return np.isfinite(y) & (y >= self.lower) & (y <= self.upper)

    def check_support(self, y: np.ndarray | float, name: str = "y") -> None:
        outside = ~self.in_support(y)
        if np.any(outside):
            bad = np.asarray(y, dtype=float)[outside].ravel()[0]
            raise InputError(f"{name}={bad} outside the margin support [{self.lower}, {self.upper}]")


def encode_bound(value: float) -> float | None:
    return float(value) if np.isfinite(value) else None


def decode_bound(value: float | None, default: float) -> float:
    return default if value is None else float(value)
