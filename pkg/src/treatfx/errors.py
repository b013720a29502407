"""Exception hierarchy shared across the package; CLI exit codes map onto it."""


class TreatfxError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(TreatfxError):
    """Invalid run configuration or CLI arguments."""

    exit_code = 2


class DataError(TreatfxError):
    """Schema violations, missing columns, infeasible splits."""

    exit_code = 3


class NumericError(TreatfxError):
    """Numerical failures: singular covariances, infeasible optimizations."""

    exit_code = 4
