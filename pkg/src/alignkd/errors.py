"""Exception types raised across the package."""


class AlignKDError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(AlignKDError, ValueError):
    pass


class DomainError(AlignKDError, ValueError):
    pass


class AllMaskedRow(AlignKDError, ValueError):
    pass


class InvalidTokenId(AlignKDError, ValueError):
    pass


class EmptyMask(AlignKDError, ValueError):
    pass


class NonScalarRoot(AlignKDError, ValueError):
    pass


class NonDeterministicFunction(AlignKDError, RuntimeError):
    pass


class SequenceTooLong(AlignKDError, ValueError):
    """Also raised for empty token sequences."""


class IndivisibleGrouping(AlignKDError, ValueError):
    pass


class NotCausal(AlignKDError, ValueError):
    pass


class BadPartition(AlignKDError, ValueError):
    pass


class NegativeAttention(AlignKDError, ValueError):
    pass


class BadK(AlignKDError, ValueError):
    pass


class IndexOutOfRange(AlignKDError, IndexError):
    pass


class NegativeLambda(AlignKDError, ValueError):
    pass


class VocabMismatch(AlignKDError, ValueError):
    pass


class NonFiniteComponent(AlignKDError, ValueError):
    def __init__(self, term: str, value: float):
        super().__init__(f"{term} is not finite: {value}")
        self.term = term
        self.value = value


class NonFiniteLoss(AlignKDError, RuntimeError):
    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss in term {term!r}: {value}")
        self.term = term
        self.value = value


class ZeroVector(AlignKDError, ValueError):
    pass


class EmptyDataset(AlignKDError, ValueError):
    pass


class ParseError(AlignKDError, ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class BadSchedule(AlignKDError, ValueError):
    pass


class ConfigError(AlignKDError, ValueError):
    pass


class CheckpointError(AlignKDError, ValueError):
    pass
