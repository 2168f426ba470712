"""Exception hierarchy shared by all nestner modules."""


class NestnerError(Exception):
    """Base class for every error raised by this package."""


# numerics / layers
class ShapeMismatch(NestnerError, ValueError):
    pass


class NonFinite(NestnerError, ArithmeticError):
    pass


class DimMismatch(ShapeMismatch):
    pass


class InvalidRate(NestnerError, ValueError):
    pass


# model / checkpoints
class CheckpointError(NestnerError):
    pass


class VersionMismatch(CheckpointError):
    pass


class CorruptFile(CheckpointError):
    pass


class SpecMismatch(CheckpointError):
    pass


class InvalidSpec(NestnerError, ValueError):
    pass


# spans
class AmbiguousGold(NestnerError, ValueError):
    pass


class SpanOutOfRange(NestnerError, ValueError):
    pass


class EmptyCandidate(NestnerError, ValueError):
    pass


# training
class IndexOutOfRange(NestnerError, IndexError):
    pass


class NonFiniteGradient(NonFinite):
    pass


class EmptyCorpus(NestnerError, ValueError):
    pass


class SentenceExceedsBudget(NestnerError, ValueError):
    pass


# evaluation
class EmptyMap(NestnerError, ValueError):
    pass


# io
class ParseError(NestnerError, ValueError):
    def __init__(self, message, path=None, lineno=None):
        where = ""
        if path is not None:
            where = f"{path}:"
        if lineno is not None:
            where += f"{lineno}:"
        super().__init__(f"{where} {message}" if where else message)
        self.path = path
        self.lineno = lineno


class UnknownLabel(ParseError):
    pass


class ConfigError(NestnerError, ValueError):
    pass
