"""Exception hierarchy shared across the package.

Each class maps to a process exit code so the command-line front end can
translate failures uniformly (config -> 2, data -> 3, numeric -> 4).
"""


class FedReconError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(FedReconError):
    """Invalid, unknown, or inconsistent configuration."""

    exit_code = 2


class DataError(FedReconError):
    """Missing, malformed, or conflicting data files / directories."""

    exit_code = 3


class NumericError(FedReconError):
    """A NaN or Inf was produced where only finite values are legal."""

    exit_code = 4
