import numpy as np
import pytest

from src.domain.dto import BasisSpec
from src.domain.errors import InputError
from src.services.basis_service import (
    BasisService,
    build_design,
    design_row,
    design_rows,
    kmeans,
    monomial_exponents,
    polynomial_count,
    standardize,
)


def _covariates(n=300, d=2, seed=0):
    return np.random.default_rng(seed).uniform(size=(n, d))


def test_standardize_uses_sample_sd():
    values = _covariates()
    X = standardize(values)

    assert np.allclose(X.standardized.mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(X.standardized.std(axis=0, ddof=1), 1.0)
    assert X.names == ["x1", "x2"]


def test_standardize_rejects_constant_column():
    values = _covariates()
    values[:, 1] = 3.0

    with pytest.raises(InputError, match="x2"):
        standardize(values)


def test_monomials_ordered_by_degree_then_lexicographically():
    assert monomial_exponents(2, 2) == [(0,), (1,), (0, 0), (0, 1), (1, 1)]
    assert polynomial_count(2, 2) == 5
    assert polynomial_count(5, 2) == 20


def test_tps_column_count():
    # 20 monomials plus 50 radial terms
    design = build_design(standardize(_covariates(n=400, d=5)), BasisSpec(kind="tps", knots=50))

    assert design.matrix.shape == (400, 70)
    assert design.q == design.descriptor.q == 70
    assert len(design.descriptor.names) == 70


def test_additive_and_linear_column_counts():
    X = standardize(_covariates(d=3))

    additive = build_design(X, BasisSpec(kind="additive", knots=4, degree=2))
    linear = build_design(X, BasisSpec(kind="linear"))

    assert additive.q == 3 * 2 + 3 * 4
    assert linear.q == 3
    assert np.allclose(linear.matrix, X.standardized)


def test_radial_column_is_cubic_distance_to_its_knot():
    X = standardize(_covariates())
    design = build_design(X, BasisSpec(kind="tps", knots=5))
    knots = design.descriptor.knots
    n_poly = polynomial_count(2, 2)

    r = np.linalg.norm(X.standardized - knots[2], axis=1)

    assert np.allclose(design.matrix[:, n_poly + 2], r**3)


def test_kmeans_is_deterministic_and_monotone():
    points = _covariates(n=500, seed=3)

    first = kmeans(points, 6, seed=11)
    second = kmeans(points, 6, seed=11)

    assert np.array_equal(first.centroids, second.centroids)
    assert np.array_equal(first.labels, second.labels)
    assert all(b <= a + 1e-9 for a, b in zip(first.wss_trace, first.wss_trace[1:]))


def test_kmeans_labels_are_nearest_centroids_at_fixpoint():
    points = _covariates(n=200, seed=5)

    result = kmeans(points, 4, seed=0)
    distances = ((points[:, None, :] - result.centroids[None, :, :]) ** 2).sum(axis=2)

    assert result.iterations < 300
    assert np.array_equal(result.labels, distances.argmin(axis=1))


def test_kmeans_rejects_more_knots_than_distinct_rows():
    points = np.repeat(np.eye(2), 10, axis=0)

    with pytest.raises(InputError):
        kmeans(points, 3, seed=0)


def test_design_row_matches_training_rows():
    values = _covariates(n=120, d=3)
    design, _ = BasisService().build(values, BasisSpec(kind="tps", knots=8))

    assert np.allclose(design_row(values[17], design), design.matrix[17], atol=1e-12)
    assert np.allclose(design_rows(values[:5], design.descriptor), design.matrix[:5], atol=1e-12)


def test_design_row_dimension_mismatch():
    design, _ = BasisService().build(_covariates(), BasisSpec(kind="linear"))

    with pytest.raises(InputError, match="3 entries"):
        design_row(np.zeros(3), design)
