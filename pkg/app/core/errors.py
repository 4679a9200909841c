# app/core/errors.py
"""Error hierarchy shared by every service.

Each error carries the process exit code the CLI should return for it:
2 for configuration problems, 3 for data problems, 4 for numerical failures.
"""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class MatchingLabError(ValueError):
    exit_code = EXIT_NUMERICAL


# Configuration
class ConfigInvalid(MatchingLabError):
    exit_code = EXIT_CONFIG


class InvalidParameter(ConfigInvalid):
    pass


class MissingRun(ConfigInvalid):
    pass


# Data
class DataError(MatchingLabError):
    exit_code = EXIT_DATA


class SchemaError(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class DegenerateSample(DataError):
    pass


class EmptyMatch(DataError):
    pass


class NoTreatedUnits(DataError):
    pass


class NoVariation(DataError):
    pass


class TooFewRows(DataError):
    pass


class TooFewUnits(DataError):
    pass


class TooFewModels(DataError):
    pass


class TooFewRecords(DataError):
    pass


class ZeroVector(DataError):
    pass


class Unsatisfiable(DataError):
    pass


# Numerical
class NumericalError(MatchingLabError):
    exit_code = EXIT_NUMERICAL


class RankDeficient(NumericalError):
    pass


class Separation(NumericalError):
    pass


class SingularCovariance(NumericalError):
    pass


class ZeroVariance(NumericalError):
    pass
