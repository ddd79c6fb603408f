"""
Exception hierarchy for damping-lab.

Every error raised on purpose by the package derives from DampingLabError so
callers (and the CLI) can map failures to exit codes without string matching.
"""

from typing import Optional

import numpy as np


class DampingLabError(Exception):
    """Base class for all damping-lab errors."""


class ConfigError(DampingLabError, ValueError):
    """A configuration file or flag could not be parsed or validated."""

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        if field:
            message = f"{field}: {message}"
        super().__init__(message)


class ModelSpecError(DampingLabError, ValueError):
    """Invalid model fields, dimension mismatch or zero-pattern violation."""


class UnsupportedDriftError(DampingLabError):
    """The requested operation has no supported path for this drift."""


class MissingCertificateError(DampingLabError):
    """A contraction certificate is required but none is available."""


class IntegrationError(DampingLabError, ArithmeticError):
    """The state became non-finite during time stepping."""

    def __init__(self, message: str, step_index: Optional[int] = None,
                 last_state: Optional[np.ndarray] = None):
        self.step_index = step_index
        self.last_state = last_state
        self.summary = None
        if step_index is not None:
            message = f"{message} (step {step_index})"
        super().__init__(message)


class SingularStepError(IntegrationError):
    """The implicit X update has a singular or sign-flipping denominator."""

    def __init__(self, b_value: float, dt: float, step_index: Optional[int] = None,
                 last_state: Optional[np.ndarray] = None):
        self.b_value = b_value
        self.dt = dt
        message = (
            f"implicit step is singular: 1 + b*dt = {1.0 + b_value * dt:.6g} "
            f"with b = {b_value:.6g}, dt = {dt:.6g}; "
            f"reduce dt below {1.0 / abs(b_value) if b_value else float('inf'):.6g}"
        )
        super().__init__(message, step_index=step_index, last_state=last_state)


class ReplayMismatchError(DampingLabError, ValueError):
    """A hidden-path record does not match the run it is replayed into."""


class InsufficientTailError(DampingLabError, ValueError):
    """Too few samples in the tail region for a meaningful fit."""

    def __init__(self, required: int, available: int, what: str = "tail samples"):
        self.required = required
        self.available = available
        super().__init__(f"need at least {required} {what}, got {available}")


class AnalysisError(DampingLabError, ValueError):
    """Analysis input is out of range or non-finite."""
