"""Exception types shared across the engine."""


class CitrusError(Exception):
    """Base class for all engine errors."""


class ConfigError(CitrusError):
    """Inconsistent or invalid configuration."""


class ShapeError(CitrusError):
    """Array or position-count mismatch in a forward call."""


class VocabError(CitrusError):
    """Token id outside the model vocabulary."""


class BackendError(CitrusError):
    """Operation not supported by the selected model backend."""


class OriginError(CitrusError):
    """Origin indices appended out of order."""


class EmptyVectorError(CitrusError):
    """Numeric operation on an empty vector."""


class EmptyCacheError(CitrusError):
    """Scoring requested against an empty cache."""


class EmptyDocumentError(CitrusError):
    """Document contains no tokens."""


class LengthError(CitrusError):
    """Sequence exceeds the model's position capacity."""


class NumericalError(CitrusError):
    """Non-finite value produced where finiteness is required."""


class BudgetViolation(CitrusError):
    """A cache exceeded its slot budget.

    Carries the offending layer, cache name, and phase so harnesses can
    report exactly where the accounting broke.
    """

    def __init__(self, message: str, *, layer: int, cache: str, phase: str):
        super().__init__(message)
        self.layer = layer
        self.cache = cache
        self.phase = phase
