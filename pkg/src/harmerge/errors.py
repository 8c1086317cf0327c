"""Exception types shared across the package.

The CLI maps these onto exit codes: config/validation problems exit 2,
numerical failures exit 3, I/O failures exit 4.
"""


class CongruenceError(ValueError):
    """Two parameter sets disagree in names, order, or shapes."""


class ConfigError(ValueError):
    """A configuration document or argument failed validation."""


class DataFormatError(ValueError):
    """A data or checkpoint file is malformed."""


class NumericsError(RuntimeError):
    """Training produced a non-finite loss; carries a diagnostic dict."""

    def __init__(self, message: str, diagnostic: dict | None = None):
        super().__init__(message)
        self.diagnostic = diagnostic or {}
