"""Covariate basis expansion: standardization, k-means knots, polynomial and radial terms."""
from __future__ import annotations

import logging
import time
from itertools import combinations_with_replacement
from math import comb

import numpy as np
from scipy.spatial.distance import cdist

from src.domain.dto import BasisSpec
from src.domain.errors import InputError
from src.domain.types import BasisDescriptor, DesignMatrix, KMeansResult, RawCovariates

logger = logging.getLogger(__name__)


def standardize(values: np.ndarray, names: list[str] | None = None) -> RawCovariates:
    """Wrap raw covariates with their column means and sample standard deviations.

    Raises:
        InputError: fewer than two rows, non-finite entries or a constant column

    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if values.ndim != 2:
        raise InputError(f"covariates must be a matrix, got shape {values.shape}")
    n, d = values.shape
    if n < 2:
        raise InputError(f"need at least 2 covariate rows, got {n}")
    names = names or [f"x{c + 1}" for c in range(d)]
    if len(names) != d:
        raise InputError(f"{len(names)} covariate names for {d} columns")

    bad = np.argwhere(~np.isfinite(values))
    if bad.size:
        row, col = bad[0]
        raise InputError(f"non-finite covariate at row {row}, column '{names[col]}'")

    center = values.mean(axis=0)
    scale = values.std(axis=0, ddof=1)
    constant = [names[c] for c in np.flatnonzero(~(scale > 0))]
    if constant:
        raise InputError(f"covariate columns with zero standard deviation: {constant}")

    return RawCovariates(values=values, names=list(names), center=center, scale=scale)


def kmeans(points: np.ndarray, k: int, seed: int, max_iter: int = 300) -> KMeansResult:
    """Lloyd's algorithm with squared Euclidean distance.

    Starts from k distinct rows picked by `seed` and stops at an assignment
    fixpoint or after `max_iter` updates. A cluster that empties is re-seeded
    at the point farthest from its current centroid.
    """
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    unique = np.unique(points, axis=0)
    if k < 1 or k > unique.shape[0]:
        raise InputError(f"cannot place {k} knots on {unique.shape[0]} distinct covariate rows")

    rng = np.random.default_rng(seed)
    centroids = unique[np.sort(rng.choice(unique.shape[0], size=k, replace=False))].copy()
    labels = np.full(n, -1)
    trace: list[float] = []

    iterations = 0
    for iterations in range(1, max_iter + 1):
        new_labels = np.argmin(cdist(points, centroids, "sqeuclidean"), axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels

        for m in range(k):
            members = labels == m
            if members.any():
                centroids[m] = points[members].mean(axis=0)

        for m in range(k):
            if np.any(labels == m):
                continue
            own = np.sum((points - centroids[labels]) ** 2, axis=1)
            far = int(np.argmax(own))
            logger.warning("k-means cluster %d emptied, re-seeding at row %d", m, far)
            centroids[m] = points[far]
            labels[far] = m

        trace.append(float(np.sum((points - centroids[labels]) ** 2)))

    return KMeansResult(centroids=centroids, labels=labels, wss_trace=trace, iterations=iterations)


def select_knots(X: RawCovariates, k: int, seed: int, max_iter: int = 300) -> np.ndarray:
    """k x d knots: final k-means centroids of the standardized covariates."""
    return kmeans(X.standardized, k, seed, max_iter).centroids


def monomial_exponents(d: int, degree: int) -> list[tuple[int, ...]]:
    """Variable index tuples of every monomial with total degree 1..degree.

    Ordered by degree, then lexicographically; (0, 0) is x1², (0, 1) is x1·x2.
    """
    return [
        combo
        for deg in range(1, degree + 1)
        for combo in combinations_with_replacement(range(d), deg)
    ]


def polynomial_count(d: int, degree: int) -> int:
    return comb(d + degree, degree) - 1


def _monomial_name(combo: tuple[int, ...], names: list[str]) -> str:
    return "*".join(names[c] for c in combo)


def _radial(r: np.ndarray, exponent: float) -> np.ndarray:
    return r**exponent


def _expand(Z: np.ndarray, descriptor: BasisDescriptor) -> np.ndarray:
    """Basis columns for already standardized rows."""
    spec = descriptor.spec
    if spec.kind == "linear":
        return Z.copy()

    if spec.kind == "tps":
        combos = monomial_exponents(descriptor.d, spec.degree)
        poly = np.column_stack([np.prod(Z[:, list(c)], axis=1) for c in combos])
        radial = _radial(cdist(Z, descriptor.knots, "euclidean"), spec.radial_exponent)
        return np.hstack([poly, radial])

    # additive: per covariate powers then per covariate radial terms
    poly = np.column_stack([Z[:, c] ** e for c in range(descriptor.d) for e in range(1, spec.degree + 1)])
    radial = np.column_stack(
        [
            _radial(np.abs(Z[:, c][:, None] - descriptor.knots[:, c][None, :]), spec.radial_exponent)
            for c in range(descriptor.d)
        ],
    )
    return np.hstack([poly, radial])


def _describe(X: RawCovariates, spec: BasisSpec) -> BasisDescriptor:
    Z = X.standardized
    d = Z.shape[1]

    if spec.kind == "linear":
        knots = np.zeros((0, d))
        names = list(X.names)
    elif spec.kind == "tps":
        knots = select_knots(X, spec.knots, spec.seed, spec.max_iter)
        names = [_monomial_name(c, X.names) for c in monomial_exponents(d, spec.degree)]
        names += [f"tps[{m}]" for m in range(spec.knots)]
    else:
        knots = np.column_stack(
            [kmeans(Z[:, [c]], spec.knots, spec.seed + c, spec.max_iter).centroids[:, 0] for c in range(d)],
        )
        names = [f"{X.names[c]}^{e}" for c in range(d) for e in range(1, spec.degree + 1)]
        names += [f"{X.names[c]}.rad[{m}]" for c in range(d) for m in range(spec.knots)]

    return BasisDescriptor(
        spec=spec,
        knots=knots,
        center=X.center.copy(),
        scale=X.scale.copy(),
        names=names,
        q=len(names),
        covariates=list(X.names),
    )


def build_design(X: RawCovariates, spec: BasisSpec) -> DesignMatrix:
    """Expand covariates into the design matrix F.

    Row i holds the monomials of the standardized x_i with total degree
    1..spec.degree (no intercept) followed by φ(‖x_i − κ_m‖) for each knot.
    """
    descriptor = _describe(X, spec)
    matrix = _expand(X.standardized, descriptor)
    if not np.all(np.isfinite(matrix)):
        raise InputError("design matrix has non-finite entries")
    return DesignMatrix(matrix=matrix, descriptor=descriptor)


def design_rows(X_new: np.ndarray, basis: DesignMatrix | BasisDescriptor) -> np.ndarray:
    """Apply the training transformation to new raw covariate rows."""
    descriptor = basis.descriptor if isinstance(basis, DesignMatrix) else basis
    X_new = np.atleast_2d(np.asarray(X_new, dtype=float))
    if X_new.shape[1] != descriptor.d:
        raise InputError(f"covariate vector has {X_new.shape[1]} entries, basis expects {descriptor.d}")
    if not np.all(np.isfinite(X_new)):
        raise InputError("non-finite covariate values")
    return _expand((X_new - descriptor.center) / descriptor.scale, descriptor)


def design_row(x_new: np.ndarray, basis: DesignMatrix | BasisDescriptor) -> np.ndarray:
    x_new = np.asarray(x_new, dtype=float)
    if x_new.ndim != 1:
        raise InputError(f"expected one covariate vector, got shape {x_new.shape}")
    return design_rows(x_new[None, :], basis)[0]


class BasisService:
    """Builds design matrices for the regression services."""

    def build(
            self,
            values: np.ndarray,
            spec: BasisSpec,
            names: list[str] | None = None) -> tuple[DesignMatrix, int]:
        """Standardize raw covariates and expand them.

        Args:
            values (np.ndarray): n x d raw covariates
            spec (BasisSpec): basis settings
            names (list[str] | None): covariate names

        Returns:
            tuple[DesignMatrix, int]: design matrix and elapsed milliseconds

        """
        start = time.perf_counter()

        design = build_design(standardize(values, names), spec)

        elapsed_ms = int((time.perf_counter() - start) * 1000)
        logger.info("Built %s basis with q=%d columns in %d ms", spec.kind, design.q, elapsed_ms)
        return design, elapsed_ms
