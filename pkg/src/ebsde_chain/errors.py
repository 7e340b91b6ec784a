"""Exception hierarchy shared by all solver modules."""


class EbsdeError(Exception):
    """Base class for every error raised by this package."""


class RateMatrixError(EbsdeError, ValueError):
    pass


class NonSquare(RateMatrixError):
    def __init__(self, shape):
        super().__init__(f"rate matrix must be square with n >= 2, got shape {shape}")
        self.shape = shape


class NegativeOffDiagonal(RateMatrixError):
    def __init__(self, i, j, value):
        super().__init__(f"off-diagonal entry ({i}, {j}) is negative: {value!r}")
        self.i, self.j, self.value = i, j, value


class ColumnSumNonzero(RateMatrixError):
    def __init__(self, j, total):
        super().__init__(f"column {j} sums to {total!r}, expected 0")
        self.j, self.total = j, total


class DimensionMismatch(RateMatrixError):
    pass


class Reducible(EbsdeError):
    """The chain has more than one closed communicating class, or transient states."""


class SolveFailure(EbsdeError):
    pass


class QuadratureNonconvergent(EbsdeError):
    pass


class NoDecay(EbsdeError):
    pass


class NotBalanced(EbsdeError):
    """A perturbation produced a negative off-diagonal rate."""


class BadBeta(EbsdeError, ValueError):
    pass


class ControlNotDominated(EbsdeError, ValueError):
    def __init__(self, control, reason):
        super().__init__(f"control {control!r} is not strictly controlled by the reference: {reason}")
        self.control = control
        self.reason = reason


class Nonconvergence(EbsdeError):
    def __init__(self, message, iterations=None, residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class BoundViolation(EbsdeError):
    pass


class StepFailure(EbsdeError):
    pass


class ScheduleExhausted(Nonconvergence):
    pass


class TooManyPolicies(EbsdeError):
    pass


class MeetingTimeout(EbsdeError):
    pass


class NotStrictlyControlled(EbsdeError):
    pass
