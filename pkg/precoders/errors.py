# precoders/errors.py
"""
Error vocabulary shared by the precoder modules.

Orchestration code (run_experiment.py) catches PrecoderError per sweep cell,
records the failure as a status row and keeps going.
"""


class PrecoderError(RuntimeError):
    """Base class for everything the precoders package raises on purpose."""


class ConfigurationError(PrecoderError, ValueError):
    pass


class DimensionError(PrecoderError, ValueError):
    pass


class DegenerateRetractionError(PrecoderError):
    """Candidate power of some BS collapsed to (almost) zero during a retraction."""

    def __init__(self, bs_index: int, power: float):
        super().__init__(f"degenerate retraction at BS {bs_index}: candidate power {power:.3e}")
        self.bs_index = bs_index
        self.power = power


class NumericalDomainError(PrecoderError, ArithmeticError):
    pass


class LineSearchFailure(PrecoderError):
    def __init__(self, inner_iters: int, alpha: float):
        super().__init__(f"no sufficient decrease after {inner_iters} trial steps (last alpha={alpha:.3e})")
        self.inner_iters = inner_iters
        self.alpha = alpha


class BaselineInfeasibleError(PrecoderError):
    pass


class ParseError(PrecoderError, ValueError):
    """Malformed channel dump or result CSV; carries the offending line number."""

    def __init__(self, path: str, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = path
        self.line_no = line_no
        self.reason = reason
