"""Exception hierarchy.

Every error belongs to one of three families, each mapped to a CLI exit code:
configuration problems (2), data problems (3) and numeric failures (4).
"""


class CanfError(Exception):
    exit_code = 1


class ConfigError(CanfError, ValueError):
    exit_code = 2


class DataError(CanfError, ValueError):
    exit_code = 3


class NumericError(CanfError, ArithmeticError):
    exit_code = 4


# configuration / usage
class DimensionMismatch(ConfigError):
    pass


class ShapeMismatch(ConfigError):
    pass


class TapeMismatch(ConfigError):
    pass


class StrategyUnfit(ConfigError):
    pass


class IncompatibleBundles(ConfigError):
    pass


class WindowLengthMismatch(ConfigError):
    pass


# data
class EmptyData(DataError):
    pass


class NonFiniteInput(DataError):
    pass


class TooFewPoints(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class NonHourlyCadence(DataError):
    pass


class NegativeLoad(DataError):
    pass


class TooShort(DataError):
    pass


class SegmentTooShort(DataError):
    pass


class ZeroVariance(DataError):
    pass


class ZeroOptimalUtility(DataError):
    pass


# numeric
class NotPositiveDefinite(NumericError):
    pass


class DegenerateComponent(NumericError):
    pass


class AllWeightsVanish(NumericError):
    pass


class NonFiniteLoss(NumericError):
    pass


class NonFiniteLogDensity(NumericError):
    def __init__(self, message, count=0, indices=()):
        super().__init__(message)
        self.count = count
        self.indices = tuple(indices)
