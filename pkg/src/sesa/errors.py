"""Exception hierarchy.

Every error carries an ``exit_code`` that the command line maps to the
process status: 3 for bad data, 4 for numeric failures, 5 for network.
"""


class SesaError(Exception):
    exit_code = 3


class DataError(SesaError, ValueError):
    exit_code = 3


class NumericError(SesaError, ArithmeticError):
    exit_code = 4


class NetworkError(SesaError):
    exit_code = 5


# tensor
class ShapeMismatch(DataError):
    pass


class NonFiniteInput(NumericError):
    pass


class NotScalar(DataError):
    pass


# backbone / control
class InvalidRange(DataError):
    pass


class StepOutOfRange(DataError):
    pass


class ConfigMismatch(DataError):
    pass


class LevelMismatch(DataError):
    pass


# fusion / enhance
class ResolutionMismatch(DataError):
    pass


class EmptyPyramid(DataError):
    pass


class EmptyPrompt(DataError):
    pass


class IndexOutOfRange(DataError):
    pass


# metrics
class DimMismatch(DataError):
    pass


class TooFewSamples(DataError):
    pass


class NumericalInstability(NumericError):
    pass


class BoxOutOfBounds(DataError):
    pass


class AllMasked(DataError):
    pass


# harness
class ConfigError(DataError):
    exit_code = 2  # a bad config file is a usage problem


class BadMagic(DataError):
    pass


class VersionMismatch(DataError):
    pass


class Corrupt(DataError):
    def __init__(self, offset, message="truncated or corrupt tensor file"):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class EmptyMask(DataError):
    pass


class NanLoss(NumericError):
    def __init__(self, epoch, step):
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


# semantics
class EndpointError(NetworkError):
    """Base for remote-model failures; records where and how often we tried."""

    def __init__(self, message, endpoint=None, attempts=0):
        where = f" [{endpoint}]" if endpoint else ""
        super().__init__(f"{message}{where} after {attempts} attempt(s)")
        self.endpoint = endpoint
        self.attempts = attempts


class Network(EndpointError):
    def __init__(self, message, endpoint=None, attempts=0, status=None):
        super().__init__(message, endpoint, attempts)
        self.status = status


class Timeout(EndpointError):
    pass


class EmptyResponse(EndpointError):
    pass


class MalformedJson(DataError):
    pass


class MissingField(DataError):
    def __init__(self, name):
        super().__init__(f"missing field {name!r}")
        self.name = name
