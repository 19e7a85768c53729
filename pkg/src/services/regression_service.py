import logging
import time

import numpy as np
from scipy.stats import norm

from src.domain.dto import BasisSpec, FitConfig, MarginSpec, PriorSpec
from src.domain.errors import CopulaError, InputError
from src.domain.types import FitTrace, FittedModel
from src.services.basis_service import BasisService
from src.services.copula_model import CopulaPosterior
from src.services.margin_service import MarginService
from src.services.margins.base import Margin
from src.services.vi_service import VariationalService

logger = logging.getLogger(__name__)


class RegressionService:
    """Fits the multivariate regression copula end to end: margins, basis, variational posterior."""

    def __init__(
            self,
            margins: MarginService | None = None,
            basis: BasisService | None = None,
            vi: VariationalService | None = None) -> None:
        self.margins = margins or MarginService()
        self.basis = basis or BasisService()
        self.vi = vi or VariationalService()

    def fit(
            self,
            Y: np.ndarray,
            X: np.ndarray,
            basis_spec: BasisSpec,
            prior: PriorSpec,
            config: FitConfig,
            response_names: list[str] | None = None,
            covariate_names: list[str] | None = None,
            margin_specs: dict[str, MarginSpec] | list[MarginSpec] | None = None,
            margins: list[Margin] | None = None) -> tuple[FittedModel, FitTrace, int]:
        """Fit the model to responses Y (n x p) and raw covariates X (n x d).

        Args:
            Y (np.ndarray): responses
            X (np.ndarray): raw covariates
            basis_spec (BasisSpec): covariate basis
            prior (PriorSpec): correlation prior
            config (FitConfig): variational fit settings
            response_names (list[str] | None): names of the response columns
            covariate_names (list[str] | None): names of the covariate columns
            margin_specs: declared margins, KDE by default
            margins (list[Margin] | None): already fitted margins, skips estimation

        Returns:
            tuple[FittedModel, FitTrace, int]: model, ELBO trace and elapsed milliseconds

        """
        start = time.perf_counter()

        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        X = np.asarray(X, dtype=float)
        if Y.shape[0] != X.shape[0]:
            raise InputError(f"{Y.shape[0]} response rows but {X.shape[0]} covariate rows")
        names = response_names or [f"y{j + 1}" for j in range(Y.shape[1])]

        if margins is None:
            margins, _ = self.margins.fit_all(Y, names, margin_specs)
        elif len(margins) != Y.shape[1]:
            raise InputError(f"{len(margins)} margins for {Y.shape[1]} responses")
        z = self.margins.to_scores(margins, Y)
        design, _ = self.basis.build(X, basis_spec, covariate_names)

        target = CopulaPosterior(z, design.matrix, prior)
        start_mean = target.initial_mean(config.init_ridge)
        if config.mode_search_iterations:
            start_mean = target.find_mode(start_mean, config.mode_search_iterations, config.log_scale_bounds)
        params, trace = self.vi.fit(target, config, start_mean)

        # Copula log-likelihood at the variational mean plus the margin Jacobian
        log_jacobian = sum(
            float(np.sum(m.logpdf(Y[:, j]) - norm.logpdf(z[:, j]))) for j, m in enumerate(margins)
        )
        try:
            trace.log_likelihood = target.log_copula_likelihood(params.mu) + log_jacobian
        except CopulaError:
            logger.exception("Could not evaluate the log-likelihood at the fitted mean")

        model = FittedModel(
            params=params,
            layout=target.layout,
            basis=design.descriptor,
            margins=margins,
            response_names=list(names),
            prior=prior,
            fit_config=config,
        )

        elapsed_ms = int((time.perf_counter() - start) * 1000)
        logger.info(
            "Fitted copula regression: n=%d, p=%d, q=%d, log-likelihood %s, %d ms",
            Y.shape[0], Y.shape[1], design.q, trace.log_likelihood, elapsed_ms,
        )
        return model, trace, elapsed_ms
