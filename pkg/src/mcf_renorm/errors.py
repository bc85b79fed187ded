"""Exception hierarchy shared by every pipeline stage.

Each class carries a short ``tag`` used by the command-line driver in its
machine-readable error records, and a ``kind`` that selects the exit code
(``"config"`` maps to 2, ``"numeric"`` to 3).
"""


class MCFError(Exception):
    """Base class for all package errors."""

    tag = "error"
    kind = "numeric"

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details


class InvalidArgument(MCFError, ValueError):
    tag = "invalid-argument"
    kind = "config"


class ConfigError(MCFError):
    tag = "config"
    kind = "config"


class NondegeneracyError(MCFError):
    tag = "nondegeneracy"
    kind = "config"


class PrecisionExhausted(MCFError):
    tag = "precision-exhausted"


class ReductionFailure(MCFError):
    tag = "reduction-failure"


class ParameterSingularity(MCFError):
    tag = "parameter-singularity"


class RationalFrequency(MCFError):
    tag = "rational-frequency"


class ScheduleError(MCFError):
    tag = "schedule"


class SmallDivisorError(MCFError):
    tag = "small-divisor"


class DomainError(MCFError):
    tag = "domain"


class AnalyticityExhausted(MCFError):
    tag = "analyticity-exhausted"


class EliminationFailure(MCFError):
    tag = "elimination-failure"
