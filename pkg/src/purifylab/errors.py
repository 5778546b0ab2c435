class DomainError(ValueError):
    """An argument lies outside the domain of the operation."""


class NumericalError(ArithmeticError):
    """A computation produced a non-finite value."""

    def __init__(self, message, x=None, t=None):
        super().__init__(message)
        self.x = x
        self.t = t


class UnsupportedError(NotImplementedError):
    """The operation is not defined for this kind of input."""


class ContractError(RuntimeError):
    """A caller broke an ordering contract (e.g. a stale forward cache)."""


class TrainingError(RuntimeError):
    """Training diverged."""

    def __init__(self, message, iteration, last_loss=None):
        super().__init__(message)
        self.iteration = iteration
        self.last_loss = last_loss
