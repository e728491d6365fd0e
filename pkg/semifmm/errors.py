"""
Exception hierarchy for semifmm.
Each error carries the CLI exit code it maps to and an optional short machine code.
"""
from typing import Any, Dict, Optional


class FmmError(Exception):
    """Base class for all semifmm failures."""

    exit_code = 1

    def __init__(self, message: str, *, code: Optional[str] = None):
        super().__init__(message)
        self.code = code or ""


class ValidationError(FmmError, ValueError):
    """Bad inputs: dimensions, ranges, missing metadata, non-finite values."""

    exit_code = 2


class FormulaError(ValidationError):
    """Model formula could not be parsed."""

    def __init__(self, message: str, *, position: int, token: str):
        super().__init__(f"{message} at position {position} (token {token!r})", code="formula_parse")
        self.reason = message
        self.position = position
        self.token = token


class StaleArtifactError(ValidationError):
    """An upstream stage artifact changed after a downstream stage consumed it."""

    def __init__(self, message: str):
        super().__init__(message, code="stale_artifact")


class NumericalError(FmmError, ArithmeticError):
    """Singular systems, non-PD covariances, failed decompositions."""

    exit_code = 3


class ChainError(NumericalError):
    """An MCMC chain failed; `state` holds the chain state at the failure."""

    def __init__(self, message: str, *, k: int, state: Dict[str, Any]):
        super().__init__(f"chain {k}: {message}", code="chain_failure")
        self.k = k
        self.state = state


class ConvergenceError(FmmError):
    """Non-convergence promoted to an error by --strict."""

    exit_code = 4

    def __init__(self, message: str):
        super().__init__(message, code="non_convergence")
