"""Exception taxonomy shared across the package.

Exit-code mapping used by the CLI: ConfigError -> 2, ManifestError -> 3,
NumericError / DivergenceError -> 4, VerificationError -> 5.
"""


class V2AError(Exception):
    """Base class for all package errors."""


class ConfigError(V2AError):
    """Invalid configuration, shapes, or arguments."""


class DomainError(V2AError):
    """Inputs outside an environment's declared state/action spaces."""


class ManifestError(V2AError):
    """Missing or stale stage artifacts."""


class NumericError(V2AError):
    """Non-finite value encountered during numeric computation."""

    def __init__(self, message, segment=None):
        super().__init__(message)
        self.segment = segment


class DivergenceError(V2AError):
    """Training objective diverged; carries the best iterate seen so far."""

    def __init__(self, message, best_params=None, history=None):
        super().__init__(message)
        self.best_params = best_params
        self.history = history


class VerificationError(V2AError):
    """A theory-verification suite failed."""
