"""Exception hierarchy shared across the package.

Each class carries a ``category`` string so the command-line driver can map
failures onto stable exit codes without inspecting messages.
"""

from __future__ import annotations


class CapshareError(Exception):
    category = "numeric-error"


class DataError(CapshareError):
    """Input panel is unusable.

    ``rejections`` holds ``(row, reason)`` pairs collected before the failure,
    so callers can still write the rejection report.
    """

    category = "data-error"

    def __init__(self, message: str, rejections=None):
        super().__init__(message)
        self.rejections = list(rejections or [])


class ConfigError(CapshareError, ValueError):
    category = "config-error"


class NumericError(CapshareError, ArithmeticError):
    category = "numeric-error"


class SingularSystemError(NumericError):
    """Penalized normal equations cannot be solved."""

    def __init__(self, message: str, min_eigenvalue: float):
        super().__init__(f"{message} (smallest eigenvalue {min_eigenvalue:.3e})")
        self.min_eigenvalue = min_eigenvalue
