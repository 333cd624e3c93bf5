"""Exception taxonomy shared across the package.

Exit-code mapping used by the CLI: configuration problems -> 1,
numeric failures -> 2, I/O and file-format problems -> 3.
"""


class FLTLabError(Exception):
    """Base class for all package errors."""


class ShapeError(FLTLabError):
    """Rejected input: shape or layout mismatch."""


class DegenerateInputError(FLTLabError):
    """Empty batch, empty shard, or otherwise degenerate input."""


class NumericError(FLTLabError):
    """A non-finite value appeared inside a numeric operation."""


class ConfigError(FLTLabError):
    """Invalid configuration: unknown key, bad value, infeasible plan."""


class AggregationError(FLTLabError):
    """Mixed payload kinds or an empty update set at the server."""


class DataFormatError(FLTLabError):
    """Malformed IDX file or CSV: bad magic, truncation, count mismatch."""
