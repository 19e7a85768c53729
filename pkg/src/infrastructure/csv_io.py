import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

from src.domain.errors import InputError
from src.domain.types import CensusData, CensusDesign

logger = logging.getLogger(__name__)

STDOUT = "-"


def read_table(path: str | Path, required: list[str] | None = None) -> pd.DataFrame:
    """Read a headed CSV whose required columns are all finite numbers.

    Args:
        path (str | Path): CSV file with a header row
        required (list[str] | None): columns that must exist, all columns when omitted

    Returns:
        pd.DataFrame: the required columns as float64

    Raises:
        InputError: unreadable file, missing column or a non-numeric cell,
            named by its 1-based file line and column

    """
    try:
        frame = pd.read_csv(path, dtype=str, skipinitialspace=True)
    except FileNotFoundError as e:
        raise InputError(f"CSV file {path} does not exist") from e
    except pd.errors.EmptyDataError as e:
        raise InputError(f"CSV file {path} is empty") from e
    except (pd.errors.ParserError, OSError, UnicodeDecodeError) as e:
        raise InputError(f"cannot parse CSV file {path}: {e}") from e

    columns = list(frame.columns) if not required else required
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise InputError(f"CSV file {path} lacks column(s) {missing}; header has {list(frame.columns)}")
    if frame.empty:
        raise InputError(f"CSV file {path} has a header but no rows")

    out = pd.DataFrame(index=frame.index)
    for column in columns:
        values = pd.to_numeric(frame[column], errors="coerce")
        bad = ~np.isfinite(values.to_numpy(dtype=float, na_value=np.nan))
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            # Line 1 is the header
            raise InputError(
                f"CSV file {path}, line {row + 2}, column '{column}': "
                f"'{frame[column].iloc[row]}' is not a finite number",
            )
        out[column] = values.astype(float)
    return out


def read_regression_data(
        path: str | Path,
        responses: list[str],
        covariates: list[str]) -> tuple[np.ndarray, np.ndarray]:
    """Responses (n x p) and covariates (n x d) from the declared CSV columns."""
    if not responses or not covariates:
        raise InputError("the data section must declare response and covariate columns")
    frame = read_table(path, [*responses, *covariates])
    logger.info("Read %d rows, %d responses and %d covariates from %s", len(frame), len(responses), len(covariates), path)
    return frame[responses].to_numpy(), frame[covariates].to_numpy()


def read_covariates(path: str | Path, names: list[str]) -> np.ndarray:
    return read_table(path, names).to_numpy()


def read_census(path: str | Path) -> CensusDesign:
    """Census design from a CSV with columns species, N and dT."""
    frame = read_table(path, ["N", "dT"])
    try:
        pd.read_csv(path, usecols=["species"], nrows=0)
    except ValueError as e:
        raise InputError(f"census file {path} lacks the 'species' column") from e

    n_init = frame["N"].to_numpy()
    if np.any(n_init < 0) or np.any(n_init != np.round(n_init)):
        row = int(np.flatnonzero((n_init < 0) | (n_init != np.round(n_init)))[0])
        raise InputError(f"census file {path}, line {row + 2}: N must be a non-negative integer")
    duration = frame["dT"].to_numpy()
    if np.any(duration <= 0):
        row = int(np.flatnonzero(duration <= 0)[0])
        raise InputError(f"census file {path}, line {row + 2}: dT must be positive")

    logger.info("Read census design with %d species from %s", len(frame), path)
    return CensusDesign(n_init=n_init.astype(np.int64), duration=duration)


def read_observed_census(path: str | Path) -> CensusData:
    """Observed census interval from a CSV with columns N, S, A and dT."""
    frame = read_table(path, ["N", "S", "A", "dT"])
    n, s, a, dt = (frame[c].to_numpy() for c in ("N", "S", "A", "dT"))
    invalid = (s < 0) | (s > n) | (a < 0) | (dt <= 0)
    if np.any(invalid):
        row = int(np.flatnonzero(invalid)[0])
        raise InputError(f"census file {path}, line {row + 2}: need 0 <= S <= N, A >= 0 and dT > 0")
    return CensusData(
        n_init=n.astype(np.int64),
        survivors=s.astype(np.int64),
        recruits=a.astype(np.int64),
        duration=dt,
    )


def write_table(frame: pd.DataFrame, path: str | Path | None) -> None:
    """Write a CSV atomically: a temporary file next to the target, then a rename.

    `None` or "-" writes to stdout.
    """
    if path is None or str(path) == STDOUT:
        frame.to_csv(sys.stdout, index=False)
        return

    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=target.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            frame.to_csv(f, index=False, float_format="%.17g")
        os.replace(tmp, target)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    logger.info("Wrote %d rows to %s", len(frame), target)


def write_bytes_atomic(data: bytes, path: str | Path) -> None:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=target.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, target)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
