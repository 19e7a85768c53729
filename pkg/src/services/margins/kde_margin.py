from __future__ import annotations

import logging
from typing import Any

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid
from scipy.special import logsumexp, ndtr

from src.domain.errors import EstimationError, InputError
from src.services.margins.base import Margin, decode_bound, encode_bound

logger = logging.getLogger(__name__)

GRID_SIZE = 2048
TAIL_BANDWIDTHS = 4.0
MIN_SAMPLES = 30
# Extent and resolution of the quantile table beyond each grid end
QUANTILE_TAIL_BANDWIDTHS = 9.0
QUANTILE_TAIL_POINTS = 256
LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def silverman_bandwidth(x: np.ndarray) -> float:
    """Silverman's rule of thumb, 0.9·min(sd, IQR/1.34)·n^(-1/5)."""
    sd = float(np.std(x, ddof=1))
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 0.9 * spread * x.shape[0] ** -0.2


def _images(centers: np.ndarray, lower: float, upper: float) -> list[np.ndarray]:
    """Kernel centers plus their mirror images at the finite bounds."""
    images = [centers]
    if np.isfinite(lower):
        images.append(2.0 * lower - centers)
    if np.isfinite(upper):
        images.append(2.0 * upper - centers)
    return images


def _gaussian_sum(
        grid: np.ndarray,
        centers: np.ndarray,
        weights: np.ndarray,
        bw: np.ndarray,
        lower: float,
        upper: float) -> np.ndarray:
    """Σ_c w_c φ(y; c, bw_c) on the grid, with mirror images at finite bounds."""
    scale = weights / (np.sqrt(2.0 * np.pi) * bw)
    pdf = np.zeros_like(grid)
    for image in _images(centers, lower, upper):
        u = (grid[:, None] - image[None, :]) / bw[None, :]
        pdf += np.exp(-0.5 * u * u) @ scale
    return pdf


class KdeMargin(Margin):
    """Tabulated margin: density and CDF on an increasing grid, kernel tails beyond it.

    Built by `fit`; the constructor takes an already tabulated margin so that
    artifacts restore it without refitting. Inside the grid the tables are
    interpolated. Between a grid end and the support bound the Gaussian
    kernel mixture (centers, weights, bandwidths) is evaluated directly, so
    every point of the support has a positive density and a CDF in (0, 1).
    """

    family = "kde"

    def __init__(
            self,
            grid: np.ndarray,
            density: np.ndarray,
            cdf_values: np.ndarray,
            lower: float = -np.inf,
            upper: float = np.inf,
            bandwidth: float | None = None,
            centers: np.ndarray | None = None,
            weights: np.ndarray | None = None,
            kernel_bandwidths: np.ndarray | None = None) -> None:
        super().__init__(lower, upper)
        self.grid = np.asarray(grid, dtype=float)
        self.density = np.asarray(density, dtype=float)
        self.cdf_values = np.asarray(cdf_values, dtype=float)
        self.bandwidth = bandwidth
        if not (self.grid.shape == self.density.shape == self.cdf_values.shape):
            raise InputError("grid, density and cdf tables must have the same length")
        if np.any(np.diff(self.grid) <= 0):
            raise InputError("margin grid must be strictly increasing")
        if self.grid[0] < self.lower or self.grid[-1] > self.upper:
            raise InputError("margin grid extends beyond the bounds")

        kernel = (centers, weights, kernel_bandwidths)
        if any(k is None for k in kernel) and not all(k is None for k in kernel):
            raise InputError("kernel centers, weights and bandwidths must be given together")
        self.centers = None if centers is None else np.asarray(centers, dtype=float)
        self.weights = None if weights is None else np.asarray(weights, dtype=float)
        self.kernel_bandwidths = None if kernel_bandwidths is None else np.asarray(kernel_bandwidths, dtype=float)
        if self.centers is not None:
            if not (self.centers.shape == self.weights.shape == self.kernel_bandwidths.shape):
                raise InputError("kernel centers, weights and bandwidths must have the same length")
            if np.any(self.kernel_bandwidths <= 0):
                raise InputError("kernel bandwidths must be positive")

        # Mass of the support left of the grid, right of it, and on it
        if self.centers is None:
            self._total = 1.0
            self._left_mass = 0.0
            self._right_mass = 0.0
        else:
            at_lower, at_upper = self._mixture_cdf(np.array([self.lower, self.upper]))
            at_start, at_end = self._mixture_cdf(self.grid[[0, -1]])
            self._mixture_lower = float(at_lower)
            self._mixture_upper = float(at_upper)
            self._total = float(at_upper - at_lower)
            self._left_mass = float(at_start - at_lower) / self._total
            self._right_mass = float(at_upper - at_end) / self._total
        self._inner_mass = 1.0 - self._left_mass - self._right_mass

        levels, values = self._quantile_table()
        keep = np.concatenate([[True], np.diff(levels) > 0])
        self._q_levels = levels[keep]
        self._q_values = values[keep]

    @classmethod
    def fit(cls, samples: np.ndarray, bounds: tuple[float, float] = (-np.inf, np.inf)) -> KdeMargin:
        """Bounded adaptive Gaussian KDE.

        A Silverman pilot is refined with Abramson's square-root law on
        binned data; finite bounds are handled by reflection.

        Args:
            samples (np.ndarray): observations of the response
            bounds (tuple[float, float]): support [a, b], infinite for open ends

        Returns:
            KdeMargin: tabulated margin on a 2048 point grid with kernel tails

        Raises:
            InputError: too few samples or samples outside the bounds
            EstimationError: degenerate (constant) samples

        """
        x = np.asarray(samples, dtype=float).ravel()
        lower, upper = float(bounds[0]), float(bounds[1])
        if not lower < upper:
            raise InputError(f"invalid margin bounds [{lower}, {upper}]")
        if x.shape[0] < MIN_SAMPLES:
            raise InputError(f"a margin needs at least {MIN_SAMPLES} samples, got {x.shape[0]}")
        if not np.all(np.isfinite(x)):
            raise InputError("margin samples contain non-finite values")
        if np.any((x < lower) | (x > upper)):
            raise InputError(f"margin samples fall outside the bounds [{lower}, {upper}]")
        if not np.std(x, ddof=1) > 0:
            raise EstimationError("cannot estimate a margin from constant samples")

        n = x.shape[0]
        h = silverman_bandwidth(x)
        grid = np.linspace(
            max(lower, x.min() - TAIL_BANDWIDTHS * h),
            min(upper, x.max() + TAIL_BANDWIDTHS * h),
            GRID_SIZE,
        )

        # Bin onto the grid points
        step = grid[1] - grid[0]
        edges = np.concatenate([[grid[0] - step / 2], (grid[:-1] + grid[1:]) / 2, [grid[-1] + step / 2]])
        counts, _ = np.histogram(x, bins=edges)
        occupied = counts > 0
        centers = grid[occupied]
        weights = counts[occupied] / n

        pilot = _gaussian_sum(grid, centers, weights, np.full(centers.shape, h), lower, upper)
        pilot += 1e-12

        # Abramson factors, normalized by the geometric mean of the pilot at the samples
        geom_mean = np.exp(np.mean(np.log(np.interp(x, grid, pilot))))
        local_bw = h * (pilot[occupied] / geom_mean) ** -0.5

        density = _gaussian_sum(grid, centers, weights, local_bw, lower, upper)
        density /= trapezoid(density, grid)
        cdf_values = cumulative_trapezoid(density, grid, initial=0.0)
        cdf_values /= cdf_values[-1]

        logger.debug("KDE margin on %d samples, pilot bandwidth %.4g", n, h)
        return cls(grid, density, cdf_values, lower, upper, bandwidth=h, centers=centers, weights=weights, kernel_bandwidths=local_bw)

    def _mixture_cdf(self, y: np.ndarray) -> np.ndarray:
        """Σ over kernels and images of w_c Φ((y − c)/bw_c), unnormalized."""
        y = np.asarray(y, dtype=float)
        out = np.zeros(y.shape)
        for image in _images(self.centers, self.lower, self.upper):
            out += ndtr((y[..., None] - image) / self.kernel_bandwidths) @ self.weights
        return out

    def _mixture_logpdf(self, y: np.ndarray) -> np.ndarray:
        terms = []
        for image in _images(self.centers, self.lower, self.upper):
            u = (y[..., None] - image) / self.kernel_bandwidths
            terms.append(np.log(self.weights) - np.log(self.kernel_bandwidths) - LOG_SQRT_2PI - 0.5 * u * u)
        return logsumexp(np.concatenate(terms, axis=-1), axis=-1) - np.log(self._total)

    def _regions(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Masks: left of the grid, on it, right of it; all restricted to the support."""
        inside = self.in_support(y)
        left = inside & (y < self.grid[0])
        right = inside & (y > self.grid[-1])
        return left, inside & ~left & ~right, right

    def cdf(self, y: np.ndarray | float) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        shape, y = y.shape, y.ravel()
        out = np.where(y > self.upper, 1.0, 0.0)
        left, middle, right = self._regions(y)
        out[middle] = self._left_mass + self._inner_mass * np.interp(y[middle], self.grid, self.cdf_values)
        if self.centers is not None:
            if np.any(left):
                out[left] = (self._mixture_cdf(y[left]) - self._mixture_lower) / self._total
            if np.any(right):
                out[right] = 1.0 - (self._mixture_upper - self._mixture_cdf(y[right])) / self._total
        else:
            out[right] = 1.0
        return out.reshape(shape)

    def pdf(self, y: np.ndarray | float) -> np.ndarray:
        return np.exp(self.logpdf(y))

    def logpdf(self, y: np.ndarray | float) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        shape, y = y.shape, y.ravel()
        out = np.full(y.shape, -np.inf)
        left, middle, right = self._regions(y)
        with np.errstate(divide="ignore"):
            out[middle] = np.log(self._inner_mass * np.interp(y[middle], self.grid, self.density))
        tails = left | right
        if self.centers is not None and np.any(tails):
            out[tails] = self._mixture_logpdf(y[tails])
        return out.reshape(shape)

    def _quantile_table(self) -> tuple[np.ndarray, np.ndarray]:
        """CDF levels and values over the grid, extended into the kernel tails."""
        levels = [self._left_mass + self._inner_mass * self.cdf_values]
        values = [self.grid]
        if self.centers is not None:
            reach = QUANTILE_TAIL_BANDWIDTHS * float(np.max(self.kernel_bandwidths))
            start = max(self.lower, self.grid[0] - reach)
            if start < self.grid[0]:
                head = np.linspace(start, self.grid[0], QUANTILE_TAIL_POINTS, endpoint=False)
                levels.insert(0, self.cdf(head))
                values.insert(0, head)
            end = min(self.upper, self.grid[-1] + reach)
            if end > self.grid[-1]:
                tail = np.linspace(self.grid[-1], end, QUANTILE_TAIL_POINTS + 1)[1:]
                levels.append(self.cdf(tail))
                values.append(tail)
        return np.maximum.accumulate(np.concatenate(levels)), np.concatenate(values)

    def _quantile(self, u: np.ndarray) -> np.ndarray:
        return np.interp(u, self._q_levels, self._q_values)

    def to_dict(self) -> dict[str, Any]:
        data = {
            "family": self.family,
            "lower": encode_bound(self.lower),
            "upper": encode_bound(self.upper),
            "bandwidth": self.bandwidth,
            "grid": self.grid,
            "density": self.density,
            "cdf": self.cdf_values,
        }
        if self.centers is not None:
            data["kernel"] = {"centers": self.centers, "weights": self.weights, "bandwidths": self.kernel_bandwidths}
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> KdeMargin:
        kernel = data.get("kernel") or {}
        return cls(
            data["grid"],
            data["density"],
            data["cdf"],
            decode_bound(data.get("lower"), -np.inf),
            decode_bound(data.get("upper"), np.inf),
            bandwidth=data.get("bandwidth"),
            centers=kernel.get("centers"),
            weights=kernel.get("weights"),
            kernel_bandwidths=kernel.get("bandwidths"),
        )
