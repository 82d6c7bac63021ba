"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: configuration problems exit 2, data
problems exit 3, numeric failures exit 4.
"""

from __future__ import annotations


class ConfigurationError(Exception):
    """Invalid configuration: bad hyperparameters, incompatible shapes."""


class DataError(Exception):
    """Broken or missing dataset content; messages name the offending sample."""


class NumericError(Exception):
    """Non-finite values showed up where finite arithmetic was required."""

    def __init__(self, message: str, batch_ids: list[str] | None = None):
        super().__init__(message)
        self.batch_ids = list(batch_ids or [])
