"""Exception hierarchy shared across the package."""

from __future__ import annotations


class XrlabError(Exception):
    """Base class for all package errors."""


class InputError(XrlabError, ValueError):
    """A caller-supplied value violates an operation's precondition."""


class ConfigError(XrlabError, ValueError):
    """A configuration value or file is invalid; message names the field."""


class TrainingError(XrlabError, RuntimeError):
    """Training cannot proceed (non-finite loss/gradient, bad state)."""


class NumericError(XrlabError, ArithmeticError):
    """A numeric quantity left its valid domain (e.g. non-positive ratio)."""


class PersistenceError(XrlabError, RuntimeError):
    """A checkpoint or artifact file is corrupt, truncated, or incompatible."""


class EndpointError(XrlabError, RuntimeError):
    """A remote endpoint failed after retries; carries the raw body."""

    def __init__(self, message: str, body: str | bytes | None = None):
        super().__init__(message)
        self.body = body


class ProtocolError(EndpointError):
    """A remote endpoint answered 2xx but the payload is malformed."""
