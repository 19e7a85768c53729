from prometheus_client import (
    REGISTRY,
    Counter,
    Gauge,
    Histogram,
    write_to_textfile,
)

# Core metrics requested
vi_fit_seconds = Histogram(
    "vi_fit_seconds", "Time spent in the variational ascent in seconds",
    buckets=(1, 5, 15, 30, 60, 120, 300, 600, 1200, float("inf")),
)
simulation_batch_seconds = Histogram(
    "simulation_batch_seconds", "Time spent simulating one batch of census data in seconds",
)
margin_fit_seconds = Histogram("margin_fit_seconds", "Time spent estimating the margins in seconds")
vi_rejected_draws_total = Counter(
    "vi_rejected_draws_total", "Monte Carlo draws rejected for a non-finite gradient",
)
sigma_eigenvalue_clamps_total = Counter(
    "sigma_eigenvalue_clamps_total", "Correlation matrix eigenvalues clamped at the numerical floor",
)
lfi_dropped_simulations_total = Counter(
    "lfi_dropped_simulations_total", "Simulations dropped for non-finite summary statistics",
)
vi_final_elbo = Gauge("vi_final_elbo", "Smoothed ELBO at the end of the last fit")


def update_fit_metrics(
        fit_ms: int,
        final_elbo: float,
        rejected_draws: int):
    """Update the fit instruments after a variational fit.

    This method updates the following metrics:
    - vi_fit_seconds: Converts the ascent wall-clock to seconds and records it
    - vi_final_elbo: Sets the final smoothed ELBO
    - vi_rejected_draws_total: Increments by the draws rejected during the fit

    Args:
        fit_ms (int): Time taken by the ascent loop in milliseconds
        final_elbo (float): Smoothed ELBO of the last iteration
        rejected_draws (int): Draws resampled because of a non-finite gradient

    """
    vi_fit_seconds.observe(fit_ms / 1000.0)
    vi_final_elbo.set(final_elbo)
    vi_rejected_draws_total.inc(rejected_draws)


def observe_margin_fit(elapsed_ms: int) -> None:
    margin_fit_seconds.observe(elapsed_ms / 1000.0)


def observe_simulation_batch(elapsed_ms: int, dropped: int = 0) -> None:
    simulation_batch_seconds.observe(elapsed_ms / 1000.0)
    lfi_dropped_simulations_total.inc(dropped)


def count_eigenvalue_clamps(count: int) -> None:
    sigma_eigenvalue_clamps_total.inc(count)


def export_metrics(path: str) -> None:
    """Write the registry in the Prometheus text format. An empty path disables the export."""
    if path:
        write_to_textfile(path, REGISTRY)
