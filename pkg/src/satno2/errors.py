"""Exception hierarchy shared by every stage of the pipeline.

Each class carries the process exit code the command-line entry point uses
when the error escapes a subcommand.
"""


class SatNO2Error(Exception):
    exit_code = 1


class ConfigurationError(SatNO2Error, ValueError):
    """Bad arguments, unknown config keys, incompatible checkpoint/variant."""

    exit_code = 2


class DataError(SatNO2Error):
    exit_code = 3


class CorruptProductError(DataError):
    pass


class GeoReferenceError(DataError):
    pass


class CoverageError(DataError):
    """A requested window or period is not sufficiently covered by data."""


class DataGapError(DataError):
    pass


class IntegrityError(DataError):
    pass


class FormatError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class NormStatsError(DataError):
    pass


class NumericError(SatNO2Error, ArithmeticError):
    exit_code = 4


class UndefinedVarianceError(NumericError, ValueError):
    pass


class ProvenanceError(ConfigurationError):
    pass


class StorageError(SatNO2Error, OSError):
    exit_code = 5
