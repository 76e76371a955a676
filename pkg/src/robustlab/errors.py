"""Exception types shared across the library."""


class ConfigurationError(ValueError):
    """A user-supplied option is unknown, malformed, or out of range."""


class ContractViolation(ValueError):
    """An argument breaks a documented precondition (shape, normalization, ...)."""


class InternalError(RuntimeError):
    """Invariant broken inside the library itself."""


class AttackDiverged(RuntimeError):
    """An attack produced a non-finite objective and was aborted."""


class TrainingDiverged(RuntimeError):
    """The training loss went non-finite; the last checkpoint is preserved."""
