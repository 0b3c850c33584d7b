"""Shared exception types.

The CLI maps ConfigError (and its subclasses raised during argument/config
validation) to exit code 2 and everything else raised mid-run to exit code 3.
"""

from __future__ import annotations


class ConfigError(ValueError):
    """Invalid configuration or argument values supplied by the caller."""


class StructuralError(ValueError):
    """Shapes, layer names, or mask keys do not line up with the network."""


class PruneRefusal(RuntimeError):
    """Requested retention target is infeasible under the one-channel floor.

    Carries the minimal feasible retention so callers can retry.
    """

    def __init__(self, message: str, minimal_feasible_retention: float):
        super().__init__(message)
        self.minimal_feasible_retention = minimal_feasible_retention
