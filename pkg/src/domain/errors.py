from __future__ import annotations

from typing import Any


class CopulaError(Exception):
    """Base class of every error raised by the copula services.

    Each subclass carries the exit code the command line maps it to.
    """

    exit_code: int = 1


class InputError(CopulaError, ValueError):
    """Malformed input, violated precondition or invalid configuration."""

    exit_code = 2


class ScoreError(InputError):
    """A scoring rule received an invalid forecast (e.g. zero density)."""


class EstimationError(CopulaError):
    """A margin could not be estimated from the given samples."""

    exit_code = 3


class NumericalError(CopulaError):
    """A numerical routine failed (non-SPD matrix, non-convergence, ...)."""

    exit_code = 3


class SamplingError(NumericalError):
    """A sampler cannot draw from the requested distribution."""


class FitDivergenceError(NumericalError):
    """The variational optimisation diverged.

    The variational parameters at the time of divergence are attached so the
    caller can dump them for diagnosis.
    """

    def __init__(self, message: str, params: Any = None, iteration: int | None = None) -> None:
        super().__init__(message)
        self.params = params
        self.iteration = iteration
