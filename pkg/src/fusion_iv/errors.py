"""Exception hierarchy shared by every module."""

from __future__ import annotations


class FusionIVError(Exception):
    """Base class for all package errors."""


# data
class FormulaSyntaxError(FusionIVError, ValueError):
    pass


class DuplicateTermError(FusionIVError, ValueError):
    pass


class IndexOutOfRangeError(FusionIVError, ValueError):
    pass


class MissingTransformedError(FusionIVError, ValueError):
    pass


class SchemaError(FusionIVError, ValueError):
    pass


class ConsistencyError(FusionIVError, ValueError):
    pass


class ParseError(FusionIVError, ValueError):
    pass


class DegenerateSampleError(FusionIVError, ValueError):
    pass


# nuisance fitting
class SeparationError(FusionIVError, ArithmeticError):
    pass


class SingularInformationError(FusionIVError, ArithmeticError):
    pass


class SingularDesignError(FusionIVError, ArithmeticError):
    pass


class SingularSystemError(FusionIVError, ArithmeticError):
    pass


class NotConvergedError(FusionIVError, ArithmeticError):
    pass


# estimation and inference
class WeakInstrumentError(FusionIVError, ArithmeticError):
    pass


class MissingNuisanceError(FusionIVError, ValueError):
    pass


class SingularBreadError(FusionIVError, ArithmeticError):
    pass


class TooManyFailuresError(FusionIVError, RuntimeError):
    pass


class AssumptionViolatedError(FusionIVError, ValueError):
    pass


class ConfigError(FusionIVError, ValueError):
    """Invalid CLI or model configuration."""
