"""Exception types shared across the package.

The CLI maps these onto stable exit codes: usage/config errors exit 2,
data/schema errors exit 3, transport errors exit 4.
"""

from __future__ import annotations


class SearchRLError(Exception):
    """Base class for package errors."""


class UsageError(SearchRLError):
    """Bad flags, unusable configuration, or violated CLI preconditions."""


class SchemaError(SearchRLError):
    """A record violates a file schema or a type invariant.

    Carries the offending field name (and input line, when known) so
    callers and tests can pinpoint the violation.
    """

    def __init__(self, message: str, *, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        parts = [message]
        if field is not None:
            parts.append(f"(field: {field})")
        if line is not None:
            parts.append(f"(line {line})")
        super().__init__(" ".join(parts))


class TransportError(SearchRLError):
    """A remote generation endpoint failed after retries."""

    def __init__(self, message: str, *, status: int | None = None, question_id: str | None = None):
        self.status = status
        self.question_id = question_id
        super().__init__(message)


class ProtocolError(SearchRLError):
    """A remote endpoint answered with a malformed body."""


class TrainingDiverged(SearchRLError):
    """Parameter norm exceeded the divergence guard during training."""
