"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Raised for invalid configuration values or unusable input data."""


class ProtocolError(RuntimeError):
    """Raised when federation messages or parameter sets are inconsistent
    (shape mismatches, unknown clients, malformed payloads)."""


class TrainingAbort(RuntimeError):
    """Raised when a local update hits a non-finite loss.

    Carries a ``diagnostics`` dict (round, client, batch, loss breakdown)
    so the failure site can be reconstructed from the message alone.
    """

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
