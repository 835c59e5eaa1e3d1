"""Exception hierarchy shared by all corrtest modules."""


class CorrTestError(Exception):
    """Base class for every error raised by corrtest."""


class DataError(CorrTestError, ValueError):
    """Observed counts are unusable."""


class NegativeCount(DataError):
    pass


class EmptyStudy(DataError):
    pass


class EmptyGroup(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InfeasibleParams(CorrTestError, ValueError):
    """Cell probabilities fall outside [0, 1]."""


class DomainError(CorrTestError, ArithmeticError):
    """A log or reciprocal argument is zero where its count is positive."""


class DegenerateData(CorrTestError):
    """The maximum likelihood estimate lies on the parameter boundary."""


class NumericalFailure(CorrTestError):
    """Base class for solver failures (CLI exit code 3)."""


class NoInteriorRoot(NumericalFailure):
    def __init__(self, message, boundary_value=None):
        self.boundary_value = boundary_value
        super().__init__(message)


class NoConvergence(NumericalFailure):
    def __init__(self, message, fit=None):
        self.fit = fit
        super().__init__(message)


class RNotEstimable(DegenerateData):
    pass


class SingularInformation(NumericalFailure):
    pass


class SimplifiedFormMismatch(NumericalFailure):
    def __init__(self, message, matrix_value=None, simplified_value=None):
        self.matrix_value = matrix_value
        self.simplified_value = simplified_value
        super().__init__(message)
