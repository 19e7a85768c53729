import logging
import os
from dataclasses import dataclass
from pathlib import Path

import yaml
from dotenv import load_dotenv
from pydantic import ValidationError

from src.domain.dto import RunConfig
from src.domain.errors import InputError

load_dotenv(dotenv_path=os.path.join(os.path.dirname(__file__), "..", ".env"))

logger = logging.getLogger(__name__)


@dataclass
class Settings:
    """Process configuration loaded from environment variables."""

    # Logging
    log_level: str = os.getenv("LOG_LEVEL", "INFO")

    # Parallel Monte Carlo draws and simulations
    threads: int = int(os.getenv("COPULA_THREADS", "1"))
    show_progress: bool = os.getenv("SHOW_PROGRESS", "false").lower() == "true"

    # Prometheus text export, empty disables it
    metrics_file: str = os.getenv("METRICS_FILE", "")

    # Artifacts: embed arrays as base64 or store them in a .npz next to the JSON
    artifact_sidecar: bool = os.getenv("ARTIFACT_SIDECAR", "false").lower() == "true"

    # Prediction defaults
    predictive_samples: int = int(os.getenv("PREDICTIVE_SAMPLES", "1000"))
    gauss_hermite_order: int = int(os.getenv("GAUSS_HERMITE_ORDER", "64"))


@dataclass
class TestSettings(Settings):
    """Process configuration for the test suite.

    No progress bars and no metrics file; fits run single threaded unless
    COPULA_TEST_THREADS asks for more. Everything else comes from Settings.
    """

    show_progress: bool = False
    metrics_file: str = ""
    threads: int = int(os.getenv("COPULA_TEST_THREADS", "1"))


def load_run_config(path: str | Path | None) -> RunConfig:
    """Read and validate a YAML run configuration.

    Args:
        path (str | Path | None): YAML file; `None` gives the defaults

    Returns:
        RunConfig: validated configuration

    Raises:
        InputError: unreadable file, bad YAML or schema violation

    """
    if path is None:
        return RunConfig()

    try:
        with open(path, encoding="utf-8") as f:
            raw = yaml.safe_load(f) or {}
    except OSError as e:
        raise InputError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise InputError(f"config {path} is not valid YAML: {e}") from e

    if not isinstance(raw, dict):
        raise InputError(f"config {path} must be a mapping at the top level")

    try:
        config = RunConfig.model_validate(raw)
    except ValidationError as e:
        raise InputError(f"invalid config {path}:\n{e}") from e

    logger.info("Loaded run config from %s", path)
    return config


settings = Settings()
test_settings = TestSettings()
