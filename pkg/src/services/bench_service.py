import logging
import time
from typing import Protocol

import numpy as np

from src.domain.dto import FitConfig, MarginSpec, ModelSpec
from src.domain.errors import CopulaError, InputError
from src.domain.types import ScoreRow, ScoreTable
from src.services.bench.noc import NocForecaster
from src.services.bench.scoring import crps_sample, log_score_from_log, rmse
from src.services.predict_service import PredictService
from src.services.regression_service import RegressionService

logger = logging.getLogger(__name__)


class Forecaster(Protocol):
    def log_density(self, x: np.ndarray, y: np.ndarray) -> float: ...

    def sample(self, x: np.ndarray, m: int, seed: int | None = 0) -> np.ndarray: ...

    def mean(self, x: np.ndarray) -> np.ndarray: ...


class CopulaForecaster:
    """Forecaster view of a fitted regression copula."""

    def __init__(self, predictor: PredictService) -> None:
        self.predictor = predictor

    def log_density(self, x: np.ndarray, y: np.ndarray) -> float:
        return self.predictor.log_predictive_density(x, y)

    def sample(self, x: np.ndarray, m: int, seed: int | None = 0) -> np.ndarray:
        return self.predictor.predictive_sample(x, m, seed).samples

    def mean(self, x: np.ndarray) -> np.ndarray:
        return self.predictor.marginal_means(x)


def assign_folds(n: int, folds: int, seed: int) -> np.ndarray:
    """Fold index per row: a seeded permutation dealt round-robin."""
    if n < folds:
        raise InputError(f"cannot split {n} rows into {folds} folds")
    fold_ids = np.empty(n, dtype=int)
    fold_ids[np.random.default_rng(seed).permutation(n)] = np.arange(n) % folds
    return fold_ids


class BenchService:
    """k-fold cross-validated CRPS, log score and RMSE for a list of model specs.

    Args:
        regression (RegressionService): fits the copula models
        samples_per_row (int): predictive draws per test row for the CRPS
        gauss_hermite_order (int): quadrature order for predictive means

    """

    def __init__(
            self,
            regression: RegressionService | None = None,
            samples_per_row: int = 200,
            gauss_hermite_order: int = 64) -> None:
        self.regression = regression or RegressionService()
        self.samples_per_row = samples_per_row
        self.gauss_hermite_order = gauss_hermite_order

    def _fit(
            self,
            spec: ModelSpec,
            Y: np.ndarray,
            X: np.ndarray,
            fit_config: FitConfig,
            margin_specs: dict[str, MarginSpec] | list[MarginSpec] | None,
            response_names: list[str] | None) -> Forecaster:
        if spec.kind == "noc":
            return NocForecaster(gauss_hermite_order=self.gauss_hermite_order).fit(Y, X, spec.basis)
        model, _, _ = self.regression.fit(
            Y, X, spec.basis, spec.prior, fit_config, response_names=response_names, margin_specs=margin_specs,
        )
        return CopulaForecaster(PredictService(model, self.gauss_hermite_order))

    def _score_rows(
            self,
            forecaster: Forecaster,
            Y: np.ndarray,
            X: np.ndarray,
            weights: np.ndarray | None,
            seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Per test row: CRPS, log score, point forecast and truth of the scored quantity."""
        n = Y.shape[0]
        crps = np.empty(n)
        ls = np.empty(n)
        points, truths = [], []
        for i in range(n):
            samples = forecaster.sample(X[i], self.samples_per_row, seed + i)
            mean = forecaster.mean(X[i])
            if weights is None:
                crps[i] = np.mean([crps_sample(samples[:, j], Y[i, j]) for j in range(Y.shape[1])])
                points.append(mean)
                truths.append(Y[i])
            else:
                crps[i] = crps_sample(samples @ weights, float(Y[i] @ weights))
                points.append([mean @ weights])
                truths.append([Y[i] @ weights])
            ls[i] = log_score_from_log(forecaster.log_density(X[i], Y[i]))
        return crps, ls, np.asarray(points), np.asarray(truths)

    def kfold_cv(
            self,
            Y: np.ndarray,
            X: np.ndarray,
            models: list[ModelSpec],
            fit_config: FitConfig,
            folds: int = 10,
            seed: int = 0,
            weights: list[float] | None = None,
            margin_specs: dict[str, MarginSpec] | list[MarginSpec] | None = None,
            response_names: list[str] | None = None) -> ScoreTable:
        """Cross-validate every model on the same seeded fold partition.

        A failing fold fit is logged and marks the model row as failed; the
        run continues with the remaining folds and models.
        """
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        X = np.asarray(X, dtype=float)
        n = Y.shape[0]
        fold_ids = assign_folds(n, folds, seed)
        w = None if weights is None else np.asarray(weights, dtype=float)
        if w is not None and w.shape != (Y.shape[1],):
            raise InputError(f"benchmark weights need {Y.shape[1]} entries")

        rows: list[ScoreRow] = []
        fold_rows: list[ScoreRow] = []
        labels: list[tuple[str, int]] = []
        for spec in models:
            all_crps, all_ls, all_points, all_truths = [], [], [], []
            failed = False
            for k in range(folds):
                start = time.perf_counter()
                train, test = fold_ids != k, fold_ids == k
                try:
                    forecaster = self._fit(spec, Y[train], X[train], fit_config, margin_specs, response_names)
                    crps, ls, points, truths = self._score_rows(forecaster, Y[test], X[test], w, seed)
                except CopulaError:
                    logger.exception("Model %s failed on fold %d", spec.name, k)
                    failed = True
                    fold_rows.append(
                        ScoreRow(spec.name, np.nan, np.nan, np.nan, failed=True,
                                 wall_clock_ms=int((time.perf_counter() - start) * 1000)),
                    )
                    labels.append((spec.name, k))
                    continue

                all_crps.append(crps)
                all_ls.append(ls)
                all_points.append(points)
                all_truths.append(truths)
                fold_rows.append(
                    ScoreRow(
                        spec.name, float(crps.mean()), float(ls.mean()), rmse(points, truths),
                        wall_clock_ms=int((time.perf_counter() - start) * 1000),
                    ),
                )
                labels.append((spec.name, k))
                logger.info("Model %s fold %d: CRPS %.4f, LS %.4f", spec.name, k, crps.mean(), ls.mean())

            if all_crps:
                row = ScoreRow(
                    spec.name,
                    float(np.concatenate(all_crps).mean()),
                    float(np.concatenate(all_ls).mean()),
                    rmse(np.concatenate(all_points), np.concatenate(all_truths)),
                    failed=failed,
                )
            else:
                row = ScoreRow(spec.name, np.nan, np.nan, np.nan, failed=True)
            row.wall_clock_ms = sum(r.wall_clock_ms for r, (name, _) in zip(fold_rows, labels, strict=True)
                                    if name == spec.name)
            rows.append(row)

        return ScoreTable(rows=rows, folds=fold_rows, fold_ids=fold_ids, seed=seed, fold_labels=labels)
