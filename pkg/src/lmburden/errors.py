"""Exception hierarchy shared across the package."""

from __future__ import annotations


class LmbError(Exception):
    """Base class for every error raised by lmburden."""


# -- network / grid model -------------------------------------------------------


class NetworkError(LmbError, ValueError):
    pass


class DisconnectedNetwork(NetworkError):
    pass


class SingularBusMatrix(NetworkError):
    pass


class ConflictingColocatedGenerators(NetworkError):
    pass


# -- parsing --------------------------------------------------------------------


class ParseError(LmbError, ValueError):
    """Malformed input. ``line``/``column`` are 1-based when known."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        loc = ""
        if line is not None:
            loc = f" (line {line}" + (f", column {column})" if column is not None else ")")
        super().__init__(message + loc)


class UnsupportedCostModel(ParseError):
    pass


class NonPositiveIncome(LmbError, ValueError):
    pass


class MissingIncome(LmbError, ValueError):
    pass


# -- QP / solver ----------------------------------------------------------------


class DimensionMismatch(LmbError, ValueError):
    pass


class RankDeficientEquality(LmbError, ValueError):
    pass


class SolverError(LmbError, RuntimeError):
    pass


class Infeasible(SolverError):
    def __init__(self, message: str, certificate=None):
        self.certificate = certificate
        super().__init__(message)


class Unbounded(SolverError):
    pass


class MaxIterations(SolverError):
    pass


# -- sensitivity ----------------------------------------------------------------


class NotConverged(LmbError, ValueError):
    pass


class SingularJacobian(LmbError, ArithmeticError):
    def __init__(self, message: str, degenerate: tuple[int, ...] = ()):
        self.degenerate = tuple(degenerate)
        super().__init__(message)


class InvalidStep(LmbError, ValueError):
    pass


# -- pricing / burden -----------------------------------------------------------


class ZeroDenominator(LmbError, ZeroDivisionError):
    pass


class MissingSeries(LmbError, ValueError):
    pass


class MisalignedSeries(LmbError, ValueError):
    pass


class ModelMismatch(LmbError, ValueError):
    pass
