"""Exception hierarchy shared across the package."""

from __future__ import annotations


class CoastError(Exception):
    """Base class for all errors raised by coastfl."""


class StructuralError(CoastError, ValueError):
    """Parameter containers of incompatible architecture, or bad lengths."""


class NumericError(CoastError, ArithmeticError):
    """NaN or otherwise unusable numeric values."""


class ConfigError(CoastError, ValueError):
    """Invalid configuration. ``problems`` lists every violated field."""

    def __init__(self, message: str, problems: list[str] | None = None):
        self.problems = list(problems or [message])
        super().__init__(message if problems is None else "; ".join(self.problems))


class TrainingError(CoastError, RuntimeError):
    def __init__(self, message: str, round_idx: int | None = None, client: int | None = None):
        self.round_idx = round_idx
        self.client = client
        super().__init__(f"{message} (round={round_idx}, client={client})")


class CorruptLogError(CoastError, IOError):
    """Round log missing, truncated, version-mismatched or failing its checksum."""


class CapabilityError(CoastError, ValueError):
    """Requested computation exceeds what the implementation supports."""
