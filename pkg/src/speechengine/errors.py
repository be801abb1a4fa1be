"""Exception hierarchy.

Every error maps onto one CLI exit code through its ``exit_code`` attribute.
"""


class EngineError(Exception):
    exit_code = 1


class ConfigError(EngineError):
    exit_code = 2


class DataError(EngineError, ValueError):
    exit_code = 3


class NumericError(EngineError, ArithmeticError):
    exit_code = 4


class StorageError(EngineError, OSError):
    exit_code = 5


# audio
class NotWav(DataError):
    pass


class UnsupportedFormat(DataError):
    pass


class Truncated(DataError):
    pass


# features
class TooShort(DataError):
    pass


class DegenerateInput(DataError):
    pass


class DimensionMismatch(DataError):
    pass


# neural core
class ShapeMismatch(DataError):
    pass


class NonFiniteInput(NumericError):
    pass


class IndexOutOfRange(DataError, IndexError):
    pass


class EmptyBatch(DataError):
    pass


class EmptySequence(DataError):
    pass


# training
class LabelMismatch(DataError):
    pass


class EmptyDevSet(DataError):
    pass


class IncompatibleCheckpoints(DataError):
    pass


class EmptyList(DataError):
    pass


class EmptyStore(DataError):
    pass


class StepNotReached(DataError):
    pass


# evaluation
class DegenerateTrialSet(DataError):
    pass


class LengthMismatch(DataError):
    pass


class TooFewGroups(DataError):
    pass


# config / io
class ParseError(ConfigError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class UnknownKey(ConfigError):
    pass


class RangeError(ConfigError):
    pass


class IoError(StorageError):
    pass


class FingerprintMismatch(DataError):
    pass


class OracleMismatch(EngineError):
    """A golden fixture no longer matches its oracle; ``case`` names it."""

    def __init__(self, message, case=None):
        super().__init__(message)
        self.case = case
