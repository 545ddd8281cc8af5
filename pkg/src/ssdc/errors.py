"""Exception types shared across the package."""

from __future__ import annotations


class SsdcError(Exception):
    """Base class for every error raised by this package."""


class RangeError(SsdcError, ValueError):
    """A query falls outside the covered range (years, trace steps, levels)."""


class DomainError(SsdcError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class CapabilityError(SsdcError):
    """A node lacks the hardware an operation needs (e.g. no GPU)."""


class HistoryError(SsdcError):
    """Not enough observed history to produce a forecast."""


class SizeError(SsdcError):
    """An instance is too large for exhaustive search."""


class StalePlanError(SsdcError):
    """The world changed between planning and execution."""


class ScenarioError(SsdcError):
    """Scenario validation failed; ``errors`` lists every violation."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid scenario:\n  " + "\n  ".join(self.errors))
