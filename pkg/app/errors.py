"""
Exception hierarchy shared by every stage of the pipeline
"""
from typing import Any, Dict, Optional


class SlamError(Exception):
    """Base class for all pipeline errors"""


class InvalidInputError(SlamError, ValueError):
    """A documented precondition was violated"""


class FormatError(SlamError):
    """A file could not be parsed"""


class SingularSystemError(SlamError):
    """Reduced normal equations could not be solved"""

    def __init__(self, message: str, condition: float):
        super().__init__(f"{message} (condition estimate {condition:.3e})")
        self.condition = condition


class NonFiniteLossError(SlamError):
    """Map optimisation produced a NaN/inf loss"""

    def __init__(self, step: int, terms: Optional[Dict[str, float]] = None):
        terms = terms or {}
        detail = ", ".join(f"{k}={v:.4g}" for k, v in terms.items())
        super().__init__(f"non-finite loss at step {step}: {detail}")
        self.step = step
        self.terms = terms


class StageError(SlamError):
    """Failure inside a named pipeline stage"""

    def __init__(self, stage: str, cause: Any):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
