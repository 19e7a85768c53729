"""Command-line surface: fit, predict, benchmark, simulate and the LFI pipeline."""
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import click
import numpy as np
import pandas as pd

from src.domain.dto import FitConfig, RunConfig
from src.domain.errors import CopulaError, FitDivergenceError, InputError, NumericalError
from src.domain.types import CensusDesign, HyperParams
from src.infrastructure.artifact_store import make_provenance
from src.infrastructure.config import Settings, load_run_config
from src.infrastructure.csv_io import (
    read_census,
    read_covariates,
    read_observed_census,
    read_regression_data,
    write_table,
)
from src.infrastructure.service_provider import (
    get_artifact_store,
    get_bench_service,
    get_lfi_service,
    get_regression_service,
    get_settings,
)
from src.metrics.metrics import export_metrics
from src.services.bench.synth import synth_generate
from src.services.lfi.simulator import default_census
from src.services.lfi.summaries import summaries
from src.services.lfi_service import NATURAL_NAMES, LfiService
from src.services.predict_service import PredictService

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
DENSITY_TAIL = 0.001


@dataclass
class CliContext:
    """State shared by the subcommands after the global options are applied."""

    config: RunConfig
    settings: Settings
    seed: int
    out: str | None
    seed_overridden: bool

    @property
    def fit_config(self) -> FitConfig:
        if self.seed_overridden:
            return self.config.fit.model_copy(update={"seed": self.seed})
        return self.config.fit

    def provenance(self) -> dict:
        return make_provenance(self.config, self.seed)

    def sibling(self, suffix: str) -> str | None:
        """Path next to --out with the given suffix, None when writing to stdout."""
        if self.out is None or self.out == "-":
            return None
        path = Path(self.out)
        return str(path.with_name(path.stem + suffix))


class CopulaGroup(click.Group):
    """Maps the service exceptions to the exit-code contract and exports metrics at exit."""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except FitDivergenceError as e:
            logger.error("Fit diverged at iteration %s: %s", e.iteration, e)
            click.echo(f"error: {e}", err=True)
            ctx.exit(e.exit_code)
        except CopulaError as e:
            click.echo(f"error: {e}", err=True)
            ctx.exit(e.exit_code)
        except (click.exceptions.Exit, click.exceptions.Abort, click.ClickException):
            raise
        except Exception as e:
            # Failures from numpy/scipy outside the service checks
            logger.exception("Unexpected %s", type(e).__name__)
            click.echo(f"error: {type(e).__name__}: {e}", err=True)
            ctx.exit(NumericalError.exit_code)
        finally:
            obj = ctx.obj
            if isinstance(obj, CliContext) and obj.settings.metrics_file:
                export_metrics(obj.settings.metrics_file)


def _configure_logging(level: str) -> None:
    root = logging.getLogger()
    if not root.handlers:
        logging.basicConfig(level=level.upper(), format=LOG_FORMAT, stream=sys.stderr)
    else:
        root.setLevel(level.upper())


def _parse_vector(text: str, what: str) -> np.ndarray:
    try:
        values = np.array([float(v) for v in text.split(",")])
    except ValueError as e:
        raise InputError(f"{what} must be comma-separated numbers, got '{text}'") from e
    if not np.all(np.isfinite(values)):
        raise InputError(f"{what} must be finite, got '{text}'")
    return values


@click.group(cls=CopulaGroup)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="YAML run configuration.")
@click.option("--seed", type=int, default=None, help="Seed for every random stream of the command.")
@click.option("--threads", type=click.IntRange(min=1), default=None, help="Worker threads for draws and simulations.")
@click.option("--out", type=click.Path(), default=None, help="Output file; CSV outputs default to stdout.")
@click.pass_context
def cli(ctx: click.Context, config_path: str | None, seed: int | None, threads: int | None, out: str | None) -> None:
    """Multivariate regression copulas fitted by variational inference."""
    settings = get_settings()
    if threads is not None:
        settings = replace(settings, threads=threads)
    _configure_logging(settings.log_level)

    config = load_run_config(config_path)
    effective_seed = config.seed if seed is None else seed
    ctx.obj = CliContext(
        config=config,
        settings=settings,
        seed=effective_seed,
        out=out,
        seed_overridden=seed is not None,
    )
    logger.debug("Running with seed %d and %d thread(s)", effective_seed, settings.threads)


@cli.command()
@click.option("--data", "data_path", type=click.Path(dir_okay=False), default=None, help="Overrides data.path.")
@click.pass_obj
def fit(obj: CliContext, data_path: str | None) -> None:
    """Fit margins, basis and the variational posterior; write the model artifact."""
    data = obj.config.data
    path = data_path or data.path
    if path is None:
        raise InputError("no data file: set data.path in the config or pass --data")
    Y, X = read_regression_data(path, data.responses, data.covariates)

    model, trace, elapsed_ms = get_regression_service(obj.settings).fit(
        Y,
        X,
        obj.config.basis,
        obj.config.prior,
        obj.fit_config,
        response_names=list(data.responses),
        covariate_names=list(data.covariates),
        margin_specs=obj.config.margins,
    )

    target = obj.out or "model.json"
    get_artifact_store(obj.settings).save(model, target, obj.provenance())
    trace_path = str(Path(target).with_name(Path(target).stem + ".trace.csv"))
    write_table(trace.to_frame(), trace_path)
    click.echo(
        f"fitted {len(data.responses)} responses on {Y.shape[0]} rows in {elapsed_ms} ms; "
        f"final smoothed ELBO {trace.smoothed[-1]:.4f}; model written to {target}",
        err=True,
    )


@cli.command()
@click.argument("artifact", type=click.Path(dir_okay=False))
@click.option("--x-file", type=click.Path(dir_okay=False), default=None, help="CSV of covariate rows.")
@click.option("--at", "at", default=None, help='One covariate vector, "v1,...,vd".')
@click.option("--density-grid", type=click.IntRange(min=2), default=None, help="Marginal densities on a grid of this size.")
@click.option("--density-at", default=None, help='Joint predictive density at "y1,...,yp".')
@click.option("--samples", type=click.IntRange(min=1), default=None, help="Joint predictive draws.")
@click.option("--functional", is_flag=True, help="Draws of the weighted sum set by predict.weights.")
@click.option("--spearman", is_flag=True, help="Spearman correlation matrix at the first row.")
@click.option("--spearman-kind", type=click.Choice(["copula", "predictive"]), default="copula")
@click.option("--mean", "means", is_flag=True, help="Marginal predictive means.")
@click.option("--mode", type=click.Choice(["plugin", "mc"]), default=None, help="Density evaluation mode.")
@click.pass_obj
def predict(
        obj: CliContext,
        artifact: str,
        x_file: str | None,
        at: str | None,
        density_grid: int | None,
        density_at: str | None,
        samples: int | None,
        functional: bool,
        spearman: bool,
        spearman_kind: str,
        means: bool,
        mode: str | None) -> None:
    """Predictive densities, draws, Spearman matrices or means at new covariates."""
    products = [density_grid is not None, density_at is not None, samples is not None, functional, spearman, means]
    if sum(products) != 1:
        raise InputError("choose exactly one of --density-grid, --density-at, --samples, --functional, --spearman, --mean")
    if (x_file is None) == (at is None):
        raise InputError("give the covariates with exactly one of --x-file or --at")

    model, _ = get_artifact_store(obj.settings).load(artifact)
    X = read_covariates(x_file, model.basis.covariates) if x_file else _parse_vector(at, "--at")[None, :]
    spec = obj.config.predict
    predictor = PredictService(model, spec.gauss_hermite_order or obj.settings.gauss_hermite_order)
    names = model.response_names
    mode = mode or spec.mode

    if samples is not None:
        frames = []
        for i, x in enumerate(X):
            frame = predictor.predictive_sample(x, samples, obj.seed + i).to_frame(names)
            if len(X) > 1:
                frame.insert(0, "row", i)
            frames.append(frame)
        out = pd.concat(frames, ignore_index=True)
    elif functional:
        if spec.weights is None:
            raise InputError("--functional needs predict.weights in the config")
        m = spec.samples or obj.settings.predictive_samples
        out = pd.concat(
            [
                pd.DataFrame({"row": i, "functional": predictor.linear_functional_sample(x, np.asarray(spec.weights), m, obj.seed + i)})
                for i, x in enumerate(X)
            ],
            ignore_index=True,
        )
    elif spearman:
        gamma = predictor.spearman_matrix(X[0], kind=spearman_kind)
        out = pd.DataFrame(gamma, columns=names)
        out.insert(0, "response", names)
    elif means:
        out = pd.DataFrame([predictor.marginal_means(x) for x in X], columns=names)
        if len(X) > 1:
            out.insert(0, "row", np.arange(len(X)))
    elif density_at is not None:
        y = _parse_vector(density_at, "--density-at")
        logs = [
            predictor.log_predictive_density(x, y, mode=mode, mc_draws=spec.mc_draws, seed=obj.seed)
            for x in X
        ]
        out = pd.DataFrame({"row": np.arange(len(X)), "log_density": logs, "density": np.exp(logs)})
    else:
        levels = np.linspace(DENSITY_TAIL, 1.0 - DENSITY_TAIL, density_grid)
        frames = []
        for i, x in enumerate(X):
            for j, (name, margin) in enumerate(zip(names, model.margins, strict=True)):
                grid = margin.quantile(levels)
                frames.append(
                    pd.DataFrame(
                        {
                            "row": i,
                            "response": name,
                            "y": grid,
                            "density": predictor.marginal_predictive_density(x, j, grid),
                        },
                    ),
                )
        out = pd.concat(frames, ignore_index=True)

    write_table(out, obj.out)


@cli.command()
@click.pass_obj
def benchmark(obj: CliContext) -> None:
    """k-fold cross-validated CRPS, LS and RMSE; uses the synthetic generator without data.path."""
    config = obj.config
    if config.data.path:
        Y, X = read_regression_data(config.data.path, config.data.responses, config.data.covariates)
        names = list(config.data.responses)
    else:
        dataset = synth_generate(config.synth.model_copy(update={"seed": obj.seed}))
        Y, X, names = dataset.responses, dataset.covariates, dataset.response_names
        logger.info("Benchmarking on synthetic data with n=%d, p=%d", Y.shape[0], Y.shape[1])

    spec = config.benchmark
    service = get_bench_service(spec.samples_per_row, obj.settings)
    table = service.kfold_cv(
        Y,
        X,
        spec.models,
        fit_config=spec.fit or obj.fit_config,
        folds=spec.folds,
        seed=obj.seed,
        weights=spec.weights,
        margin_specs=config.margins,
        response_names=names,
    )
    write_table(table.to_frame(), obj.out)
    folds_path = obj.sibling(".folds.csv")
    if folds_path:
        write_table(table.folds_frame(), folds_path)


def _census_design(obj: CliContext, census_file: str | None) -> CensusDesign:
    spec = obj.config.lfi
    path = census_file or spec.census_file
    if path:
        return read_census(path)
    return default_census(spec.species, spec.median_abundance, spec.duration, seed=obj.seed)


@cli.command()
@click.option("--kind", type=click.Choice(["regression", "census"]), default="regression",
              help="Synthetic regression data, or LFI training simulations (parameters and summaries).")
@click.option("--census-file", type=click.Path(dir_okay=False), default=None)
@click.pass_obj
def simulate(obj: CliContext, kind: str, census_file: str | None) -> None:
    """Write simulated data as CSV."""
    if kind == "regression":
        frame = synth_generate(obj.config.synth.model_copy(update={"seed": obj.seed})).to_frame()
    else:
        lfi = get_lfi_service(obj.settings)
        frame = lfi.simulate_training_set(obj.config.lfi.n_sims, _census_design(obj, census_file), obj.seed).to_frame()
    write_table(frame, obj.out)


@cli.command("lfi-train")
@click.option("--census-file", type=click.Path(dir_okay=False), default=None, help="CSV with species, N and dT.")
@click.pass_obj
def lfi_train(obj: CliContext, census_file: str | None) -> None:
    """Simulate the census model and fit the amortized posterior."""
    design = _census_design(obj, census_file)
    model, trace, table = get_lfi_service(obj.settings).train(
        obj.config.lfi, design, obj.fit_config, obj.config.prior, seed=obj.seed,
    )

    target = obj.out or "lfi_model.json"
    extra = {
        "census": {"n_init": design.n_init.astype(float), "duration": design.duration},
        "dropped_simulations": table.dropped,
    }
    get_artifact_store(obj.settings).save(model, target, obj.provenance(), kind="lfi", extra=extra)
    stem = Path(target).with_name(Path(target).stem)
    write_table(table.to_frame(), f"{stem}.simulations.csv")
    write_table(trace.to_frame(), f"{stem}.trace.csv")
    click.echo(f"trained on {table.n} simulations ({table.dropped} dropped); model written to {target}", err=True)


def _load_lfi(obj: CliContext, artifact: str):
    model, meta = get_artifact_store(obj.settings).load(artifact, kind="lfi")
    census = meta["extra"]["census"]
    design = CensusDesign(n_init=census["n_init"].astype(np.int64), duration=census["duration"])
    return model, design


@cli.command("lfi-posterior")
@click.argument("artifact", type=click.Path(dir_okay=False))
@click.option("--summaries", "summary_text", default=None, help='Observed summaries "h1,...,h5".')
@click.option("--observed", type=click.Path(dir_okay=False), default=None, help="Observed census CSV with N, S, A, dT.")
@click.option("--draws", type=click.IntRange(min=1), default=None)
@click.option("--variance-at", type=click.FloatRange(min=0), default=None,
              help="Also write the demographic variance decomposition at this abundance.")
@click.option("--check", is_flag=True, help="Also write posterior predictive summaries.")
@click.pass_obj
def lfi_posterior(
        obj: CliContext,
        artifact: str,
        summary_text: str | None,
        observed: str | None,
        draws: int | None,
        variance_at: float | None,
        check: bool) -> None:
    """Joint posterior draws of (Omega, sigma2, c, phi1, phi2) for observed census summaries."""
    if (summary_text is None) == (observed is None):
        raise InputError("give the observation with exactly one of --summaries or --observed")
    if (variance_at is not None or check) and obj.sibling("") is None:
        raise InputError("--variance-at and --check write extra files next to --out, which must be a file")
    model, design = _load_lfi(obj, artifact)
    spec = obj.config.lfi
    h_obs = _parse_vector(summary_text, "--summaries") if summary_text else summaries(read_observed_census(observed))

    lfi = get_lfi_service(obj.settings)
    posterior = lfi.posterior(model, h_obs, draws or spec.posterior_draws, obj.seed)
    write_table(pd.DataFrame(posterior, columns=NATURAL_NAMES), obj.out)

    if variance_at is not None:
        duration = float(np.median(design.duration))
        point = LfiService.demographic_variance(
            LfiService.point_estimate(posterior), variance_at, duration, spec.inner_draws, obj.seed,
        )
        sampled = LfiService.demographic_variance(
            [HyperParams(*(float(v) for v in row)) for row in posterior], variance_at, duration, spec.inner_draws, obj.seed,
        )
        frame = pd.DataFrame([{"mode": "point", **point.summary()}, {"mode": "posterior", **sampled.summary()}])
        write_table(frame, obj.sibling(".variance.csv"))
    if check:
        checks = lfi.posterior_predictive_summaries(posterior, design, obj.seed)
        frame = pd.DataFrame(checks, columns=model.basis.covariates)
        write_table(frame, obj.sibling(".check.csv"))


@cli.command()
@click.argument("artifact", type=click.Path(dir_okay=False))
@click.option("--curves", type=click.Path(dir_okay=False), default=None, help="CSV of the calibration curves.")
@click.pass_obj
def calibrate(obj: CliContext, artifact: str, curves: str | None) -> None:
    """Average posterior CDF against the prior CDF on fresh prior-predictive data."""
    model, design = _load_lfi(obj, artifact)
    spec = obj.config.lfi
    report = get_lfi_service(obj.settings).calibrate(model, design, spec.n_test, spec.posterior_draws, seed=obj.seed)
    write_table(report.to_frame(), obj.out)
    curves_path = curves or obj.sibling(".curves.csv")
    if curves_path:
        write_table(report.curves, curves_path)
