"""Shared exception types."""


class FissionError(Exception):
    """Base class for all package errors."""


class NotPositiveDefinite(FissionError):
    pass


class NonSquare(FissionError):
    pass


class DomainError(FissionError):
    pass


class InvalidParameters(FissionError):
    pass


class OutOfSupport(FissionError):
    pass


class InvalidTuning(FissionError):
    pass


class InconsistentParts(FissionError):
    pass


class InvalidSpec(FissionError):
    pass


class UnsupportedRule(FissionError):
    pass


class SingularDesign(FissionError):
    pass


class SingularHessian(FissionError):
    pass


class RankDeficientFullModel(FissionError):
    pass


class NoConvergence(FissionError):
    pass


class SeparationDetected(FissionError):
    pass


class EmptyRejectionSet(FissionError):
    pass


class TooShort(FissionError):
    pass


class RankDeficientBasis(FissionError):
    pass


class SingularBasis(FissionError):
    pass


class ConfigError(FissionError):
    """Bad experiment configuration; message names the offending field."""
