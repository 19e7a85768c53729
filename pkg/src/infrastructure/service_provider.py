from src.infrastructure.artifact_store import ArtifactStore
from src.infrastructure.config import Settings, TestSettings, settings, test_settings
from src.services.bench_service import BenchService
from src.services.lfi_service import LfiService
from src.services.regression_service import RegressionService
from src.services.vi_service import VariationalService


# Default implementations of injection
def get_settings() -> Settings:
    """Provide process settings as a dependency."""
    return settings

def get_testing_settings() -> TestSettings:
    """Provide settings for testing as a dependency."""
    return test_settings

def get_vi_service(config: Settings | None = None) -> VariationalService:
    """Provide the variational optimiser configured for threads and progress output."""
    config = config or get_settings()
    return VariationalService(threads=config.threads, show_progress=config.show_progress)

def get_regression_service(config: Settings | None = None) -> RegressionService:
    """Provide the end-to-end regression copula fitter.

    Args:
        config (Settings): Configuration settings with env variables

    """
    return RegressionService(vi=get_vi_service(config))

def get_bench_service(samples_per_row: int, config: Settings | None = None) -> BenchService:
    """Provide the cross-validation harness."""
    config = config or get_settings()
    return BenchService(
        regression=get_regression_service(config),
        samples_per_row=samples_per_row,
        gauss_hermite_order=config.gauss_hermite_order,
    )

def get_lfi_service(config: Settings | None = None) -> LfiService:
    """Provide the likelihood-free inference pipeline."""
    config = config or get_settings()
    return LfiService(
        regression=get_regression_service(config),
        threads=config.threads,
        show_progress=config.show_progress,
    )

def get_artifact_store(config: Settings | None = None) -> ArtifactStore:
    """Provide model persistence, embedding arrays or writing a sidecar file."""
    config = config or get_settings()
    return ArtifactStore(sidecar=config.artifact_sidecar)
