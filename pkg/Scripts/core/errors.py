"""
Exception hierarchy shared by every module of the nlgp package.

The CLI maps these onto process exit codes:

  * ``ConfigError``    → 2  (bad configuration or inconsistent inputs)
  * ``NumericalError`` → 3  (non-PD matrix after jitter escalation, NaN loss)
"""

from __future__ import annotations


class NlgpError(Exception):
    """Base class for all errors raised deliberately by the package."""


class ConfigError(NlgpError, ValueError):
    """Raised when a model/training configuration is inconsistent."""


class NumericalError(NlgpError, ArithmeticError):
    """Raised when a computation leaves the finite / positive-definite regime."""


EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
