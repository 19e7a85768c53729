import logging
import time
from typing import Any

import numpy as np

from src.domain.dto import MarginSpec
from src.domain.errors import InputError
from src.metrics.metrics import observe_margin_fit
from src.services.margins.base import Margin
from src.services.margins.kde_margin import KdeMargin
from src.services.margins.parametric_margin import FAMILIES, parametric_from_dict

logger = logging.getLogger(__name__)


def fit_margin(samples: np.ndarray, bounds: tuple[float, float] = (-np.inf, np.inf)) -> KdeMargin:
    """Bounded adaptive KDE margin of one response."""
    return KdeMargin.fit(samples, bounds)


def margin_from_spec(spec: MarginSpec, samples: np.ndarray | None = None) -> Margin:
    """Build the declared margin, estimating it from `samples` when it is a KDE."""
    if spec.family == "kde":
        if samples is None:
            raise InputError("a kde margin needs samples to be estimated from")
        return fit_margin(samples, spec.bounds)
    return FAMILIES[spec.family](spec.params)


def margin_from_dict(data: dict[str, Any]) -> Margin:
    if data.get("family") == "kde":
        return KdeMargin.from_dict(data)
    return parametric_from_dict(data)


class MarginService:
    """Fits the invariant margins G_1..G_p and maps responses to normal scores."""

    def fit_all(
            self,
            Y: np.ndarray,
            names: list[str],
            specs: dict[str, MarginSpec] | list[MarginSpec] | None = None) -> tuple[list[Margin], int]:
        """Fit one margin per response column.

        Args:
            Y (np.ndarray): n x p responses
            names (list[str]): response names, used to look specs up
            specs: per-response margin specs by name or position; missing ones default to an unbounded KDE

        Returns:
            tuple[list[Margin], int]: margins and elapsed milliseconds

        """
        start = time.perf_counter()

        Y = np.asarray(Y, dtype=float)
        if Y.ndim != 2 or Y.shape[1] != len(names):
            raise InputError(f"responses have shape {Y.shape}, expected {len(names)} columns")

        margins: list[Margin] = []
        for j, name in enumerate(names):
            if isinstance(specs, list):
                spec = specs[j]
            else:
                spec = (specs or {}).get(name, MarginSpec())
            try:
                margins.append(margin_from_spec(spec, Y[:, j]))
            except InputError as e:
                raise InputError(f"response '{name}': {e}") from e

        elapsed_ms = int((time.perf_counter() - start) * 1000)
        observe_margin_fit(elapsed_ms)
        logger.info("Fitted %d margins in %d ms", len(margins), elapsed_ms)
        return margins, elapsed_ms

    def to_scores(self, margins: list[Margin], Y: np.ndarray) -> np.ndarray:
        """n x p matrix of normal scores z = Φ⁻¹(G_j(y))."""
        Y = np.asarray(Y, dtype=float)
        return np.column_stack([m.to_z(Y[:, j]) for j, m in enumerate(margins)])
