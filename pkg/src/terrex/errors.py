"""Exception hierarchy. CLI exit codes are attached to each class."""


class TerrexError(Exception):
    exit_code = 2


class FormatError(TerrexError):
    """Malformed file: bad magic, version, size or layout."""


class LengthError(FormatError):
    """Payload shorter or longer than its header/partner declares."""


class ValidationError(TerrexError):
    """Data violates an invariant (e.g. non-finite coordinates)."""


class ConfigError(TerrexError):
    """Invalid configuration value or argument combination."""

    exit_code = 1


class QueryError(TerrexError):
    """Query against an empty index or cloud."""


class DomainError(TerrexError):
    """Metric or loss evaluated outside its domain (usually an empty set)."""


class ShapeError(FormatError):
    """Tensor shape disagrees with the model configuration."""


class SampleRejected(TerrexError):
    """Scan yields no usable training sample (empty X or empty Y)."""


class NumericError(TerrexError):
    exit_code = 3

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class InputTooSmall(DomainError):
    """Input cloud has fewer points than the model needs proxies."""
