"""Exception types. Subclasses of ValueError where the caller passed bad input."""


class BlabError(Exception):
    exit_code = 1


class InvalidArgument(BlabError, ValueError):
    pass


class DimensionMismatch(InvalidArgument):
    pass


class InsufficientSamples(InvalidArgument):
    pass


class ZeroFeatureVector(BlabError, ValueError):
    pass


class PlacementFailure(BlabError):
    pass


class InvariantViolation(BlabError, ValueError):
    pass


class ParseError(BlabError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(BlabError):
    exit_code = 2


class MissingDependency(BlabError):
    exit_code = 3


class NumericDivergence(BlabError):
    exit_code = 4

    def __init__(self, message, epoch=None):
        self.epoch = epoch
        super().__init__(message if epoch is None else f"{message} (epoch {epoch})")


class ZeroResultant(BlabError, ValueError):
    pass
