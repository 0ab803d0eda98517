"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Raised when tensor shapes disagree; ``axis`` names the offending axis."""

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class TapeError(RuntimeError):
    pass


class EmptyTargetMask(ValueError):
    """The target-speaker mask selects no frame, so masked statistics are undefined."""


class MissingMask(ValueError):
    pass


class GradientCheckError(ArithmeticError):
    def __init__(self, message, parameter=None):
        super().__init__(message)
        self.parameter = parameter


class NotInitializedError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class InfeasibleMixture(RuntimeError):
    pass


class DivergenceError(FloatingPointError):
    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good
