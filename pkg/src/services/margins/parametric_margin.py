from __future__ import annotations

from typing import Any

import numpy as np
from scipy import stats
from scipy.special import gammaincc, gammaln, ndtr, ndtri

from src.domain.errors import InputError
from src.services.margins.base import EPS, Z_MAX, Z_MIN, Margin, encode_bound


class ParametricMargin(Margin):
    """Closed-form margin. Subclasses define the family and its exact z maps."""

    required: tuple[str, ...] = ()

    def __init__(self, params: dict[str, float], lower: float, upper: float) -> None:
        super().__init__(lower, upper)
        missing = [k for k in self.required if k not in params]
        if missing:
            raise InputError(f"{self.family} margin is missing parameters {missing}")
        unknown = sorted(set(params) - set(self.required))
        if unknown:
            raise InputError(f"{self.family} margin got unknown parameters {unknown}")
        self.params = {k: float(params[k]) for k in self.required}

    def to_dict(self) -> dict[str, Any]:
        return {
            "family": self.family,
            "lower": encode_bound(self.lower),
            "upper": encode_bound(self.upper),
            "params": dict(self.params),
        }

    def _clip_z(self, z: np.ndarray) -> np.ndarray:
        return np.clip(z, Z_MIN, Z_MAX)


class NormalMargin(ParametricMargin):
    family = "normal"
    required = ("loc", "scale")

    def __init__(self, params: dict[str, float]) -> None:
        super().__init__(params, -np.inf, np.inf)
        if self.params["scale"] <= 0:
            raise InputError("normal margin needs scale > 0")
        self._dist = stats.norm(self.params["loc"], self.params["scale"])

    def cdf(self, y):
        return self._dist.cdf(y)

    def pdf(self, y):
        return self._dist.pdf(y)

    def logpdf(self, y):
        return self._dist.logpdf(y)

    def _quantile(self, u):
        return self._dist.ppf(u)

    def to_z(self, y):
        return self._clip_z((np.asarray(y, dtype=float) - self.params["loc"]) / self.params["scale"])

    def from_z(self, z):
        return self.params["loc"] + self.params["scale"] * np.asarray(z, dtype=float)


class LognormalMargin(ParametricMargin):
    """log Y ~ N(mu, sigma²)."""

    family = "lognormal"
    required = ("mu", "sigma")

    def __init__(self, params: dict[str, float]) -> None:
        super().__init__(params, 0.0, np.inf)
        if self.params["sigma"] <= 0:
            raise InputError("lognormal margin needs sigma > 0")
        self._dist = stats.lognorm(s=self.params["sigma"], scale=np.exp(self.params["mu"]))

    def cdf(self, y):
        return self._dist.cdf(y)

    def pdf(self, y):
        return self._dist.pdf(y)

    def logpdf(self, y):
        return self._dist.logpdf(y)

    def _quantile(self, u):
        return self._dist.ppf(u)

    def to_z(self, y):
        with np.errstate(divide="ignore"):
            z = (np.log(np.asarray(y, dtype=float)) - self.params["mu"]) / self.params["sigma"]
        return self._clip_z(z)

    def from_z(self, z):
        return np.exp(self.params["mu"] + self.params["sigma"] * np.asarray(z, dtype=float))


class ExponentialMargin(ParametricMargin):
    family = "exponential"
    required = ("rate",)

    def __init__(self, params: dict[str, float]) -> None:
        super().__init__(params, 0.0, np.inf)
        if self.params["rate"] <= 0:
            raise InputError("exponential margin needs rate > 0")
        self._dist = stats.expon(scale=1.0 / self.params["rate"])

    def cdf(self, y):
        return self._dist.cdf(y)

    def pdf(self, y):
        return self._dist.pdf(y)

    def logpdf(self, y):
        return self._dist.logpdf(y)

    def _quantile(self, u):
        return self._dist.ppf(u)

    def to_z(self, y):
        # Φ⁻¹(1 − e^{−ry}) = −Φ⁻¹(e^{−ry}), accurate in the upper tail
        survival = np.exp(-self.params["rate"] * np.clip(np.asarray(y, dtype=float), 0.0, None))
        return -ndtri(np.clip(survival, EPS, 1.0 - EPS))

    def from_z(self, z):
        return -stats.norm.logcdf(-np.asarray(z, dtype=float)) / self.params["rate"]


class LogInverseGammaMargin(ParametricMargin):
    """Law of log X for X ~ IG(shape a, scale b)."""

    family = "log_inverse_gamma"
    required = ("shape", "scale")

    def __init__(self, params: dict[str, float]) -> None:
        super().__init__(params, -np.inf, np.inf)
        if self.params["shape"] <= 0 or self.params["scale"] <= 0:
            raise InputError("log-inverse-gamma margin needs shape > 0 and scale > 0")
        self._ig = stats.invgamma(self.params["shape"], scale=self.params["scale"])

    def cdf(self, y):
        a, b = self.params["shape"], self.params["scale"]
        return gammaincc(a, b * np.exp(-np.asarray(y, dtype=float)))

    def logpdf(self, y):
        a, b = self.params["shape"], self.params["scale"]
        y = np.asarray(y, dtype=float)
        return a * np.log(b) - gammaln(a) - a * y - b * np.exp(-y)

    def pdf(self, y):
        return np.exp(self.logpdf(y))

    def _quantile(self, u):
        with np.errstate(divide="ignore"):
            return np.log(self._ig.ppf(u))

    def from_z(self, z):
        z = np.asarray(z, dtype=float)
        with np.errstate(divide="ignore"):
            lower_tail = np.log(self._ig.ppf(ndtr(np.minimum(z, 0.0))))
            upper_tail = np.log(self._ig.isf(ndtr(-np.maximum(z, 0.0))))
        return np.where(z <= 0, lower_tail, upper_tail)


FAMILIES: dict[str, type[ParametricMargin]] = {
    cls.family: cls
    for cls in (NormalMargin, LognormalMargin, ExponentialMargin, LogInverseGammaMargin)
}


def parametric_from_dict(data: dict[str, Any]) -> ParametricMargin:
    family = data.get("family")
    if family not in FAMILIES:
        raise InputError(f"unknown margin family '{family}'")
    # Support is the family's natural one; declared bounds only apply to KDE margins
    return FAMILIES[family](data.get("params", {}))
