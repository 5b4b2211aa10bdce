"""Exception types shared across the package."""


class RejectedInputError(ValueError):
    """Input violates a documented precondition or invariant."""


class DimensionMismatchError(RejectedInputError):
    """Operands have incompatible shapes."""


class DegenerateStateError(RejectedInputError):
    """A state lost essentially all of its trace and cannot be repaired."""


class NumericalBlowupError(ArithmeticError):
    """An integration step produced non-finite values."""

    def __init__(self, message, step_index=None, t=None):
        super().__init__(message)
        self.step_index = step_index
        self.t = t


class IllConditionedWeightError(RejectedInputError):
    """A weight matrix is too ill-conditioned to invert reliably."""


class StabilityError(RejectedInputError):
    """An explicit scheme was configured outside its stability region."""


class ConfigError(ValueError):
    """A scenario configuration failed validation."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))
