"""Exception types shared across the toolkit.

Plain ``ValueError`` is used for argument/usage mistakes; the classes here
mark domain-specific failure modes that callers (notably the CLI) react to.
"""


class DoskitError(Exception):
    """Base class for toolkit-specific failures."""


class BudgetExceededError(DoskitError):
    """An exact enumeration would exceed its point budget."""


class StabilizabilityError(DoskitError):
    """The Riccati recursion failed to produce a stabilizing gain."""


class NumericError(DoskitError):
    """An iterative solver failed to converge."""


class TrainingDivergedError(DoskitError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")


class CertificationError(DoskitError):
    """A grid search could not certify the requested condition."""


class CertificationViolationError(DoskitError):
    """A certified decrease condition failed at runtime.

    ``step`` is the trajectory step at which the violation occurred and
    ``partial`` holds whatever closed-loop data was collected up to it.
    """

    def __init__(self, message: str, step=None, partial=None):
        self.step = step
        self.partial = partial
        super().__init__(message)


class ConfigError(DoskitError):
    """Invalid or inconsistent run configuration."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")
