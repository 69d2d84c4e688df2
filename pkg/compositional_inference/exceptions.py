"""
Typed errors raised across the compositional inference package.

Every domain error is a ``ValueError`` so that callers which only know about
``ValueError`` (the CLI among them) handle them uniformly.
"""

from typing import Iterable, Optional


class CompositionalInferenceError(ValueError):
    """Base class for all domain errors."""


class NotSPD(CompositionalInferenceError):
    """Matrix is not symmetric positive definite, even after jitter repair."""


class NonConvergence(CompositionalInferenceError):
    """An iterative routine failed to converge."""


class NonFinite(CompositionalInferenceError):
    """A computation produced NaN/Inf or a state exceeded the divergence guard."""


class RankDeficient(CompositionalInferenceError):
    """A least-squares system lacks full column rank."""


class LengthMismatch(CompositionalInferenceError):
    """Series that must be aligned have different lengths."""


class TooFewSamples(CompositionalInferenceError):
    """Not enough samples for the requested operation."""


class NonPositiveVariance(CompositionalInferenceError):
    """A variance that must be strictly positive is zero or negative."""


class IndexOutOfRange(CompositionalInferenceError):
    """An index addresses a component outside a matrix or vector."""


class InvalidParams(CompositionalInferenceError):
    """Testbed or estimator parameters violate their invariants."""


class DanglingEdge(CompositionalInferenceError):
    """An edge references a node id that is not part of the graph."""


class SelectorOutOfRange(CompositionalInferenceError):
    """An interface selector addresses a state outside the node's state."""


class DuplicateNodeId(CompositionalInferenceError):
    """Two nodes share the same id."""


class MissingRegisterEntry(CompositionalInferenceError):
    """The global register holds no entry for a requested node."""


class MissingMeasurement(CompositionalInferenceError):
    """A filtering node has no measurement series for the current step."""


class BoundaryMismatch(CompositionalInferenceError):
    """An embedded subgraph's boundary does not match the outer node."""


class ConfigInvalid(CompositionalInferenceError):
    """A run configuration is malformed."""


class ParseError(CompositionalInferenceError):
    """A case file could not be parsed."""

    def __init__(self, message: str, line: int = 0, column: int = 0):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class UnknownScenario(CompositionalInferenceError):
    """The requested scenario is not registered."""

    def __init__(self, name: str, valid: Iterable[str], detail: Optional[str] = None):
        self.name = name
        self.valid = sorted(valid)
        message = f"Unknown scenario '{name}'. Valid scenarios: {', '.join(self.valid)}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class IoError(CompositionalInferenceError):
    """A case, law or report file could not be read or written."""
