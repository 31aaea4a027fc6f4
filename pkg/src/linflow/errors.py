"""Exception hierarchy shared by all linflow modules."""


class LinflowError(Exception):
    """Base class for every error raised by linflow."""


class ConfigurationError(LinflowError, ValueError):
    """Inconsistent shapes, bad dimensions or unknown options."""


class DomainError(LinflowError, ValueError):
    """Argument outside the branch on which a closed form is valid."""


class NumericError(LinflowError, FloatingPointError):
    """Non-finite parameters or intermediate values."""


class UnsupportedFamilyError(LinflowError, TypeError):
    """Operation not defined for the requested model family."""


class UnsupportedRegimeError(LinflowError, ValueError):
    """Requested parameter regime has no implemented closed form."""


class InfeasibleInitError(LinflowError, ValueError):
    """No parameters satisfy the requested initialization constraints."""


class DegenerateError(LinflowError, ValueError):
    """Degenerate geometry: zero norms, empty classes, all-zero init."""


class DivergenceError(NumericError):
    """Training or integration produced non-finite or exploding values."""

    def __init__(self, message, step=None, state=None):
        super().__init__(message)
        self.step = step
        self.state = state


class StiffnessError(NumericError):
    """Adaptive step size underflowed; carries the last accepted state."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class NonConvergenceError(LinflowError, RuntimeError):
    """Run ended before reaching its convergence target."""

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


class DataError(LinflowError, OSError):
    """Dataset missing or malformed."""
