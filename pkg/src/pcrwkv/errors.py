"""Exception types raised across the package."""


class PcrwkvError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(PcrwkvError, ValueError):
    pass


class DomainError(PcrwkvError, ValueError):
    """Input outside the mathematical domain of an operation (log of <= 0, divide by 0)."""


class InvalidAxis(PcrwkvError, ValueError):
    pass


class NonScalarRoot(PcrwkvError, ValueError):
    pass


class InvalidStep(PcrwkvError, ValueError):
    pass


class ChannelsNotDivisibleBy4(PcrwkvError, ValueError):
    pass


class NonFiniteCoordinate(PcrwkvError, ValueError):
    pass


class KTooLarge(PcrwkvError, ValueError):
    pass


class TooFewRows(PcrwkvError, ValueError):
    pass


class LabelOutOfRange(PcrwkvError, ValueError):
    pass


class CoordOutOfRange(PcrwkvError, ValueError):
    pass


class MTooLarge(PcrwkvError, ValueError):
    pass


class UnknownClass(PcrwkvError, ValueError):
    pass


class DegenerateCloud(PcrwkvError, ValueError):
    pass


class ParseError(PcrwkvError, ValueError):
    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
        self.path = path
        self.line = line


class CountMismatch(PcrwkvError, ValueError):
    pass


class CheckpointError(PcrwkvError, ValueError):
    """Malformed checkpoint file or checkpoint/config mismatch."""


class ConfigError(PcrwkvError, ValueError):
    pass
