"""Exception types shared across the package."""


class ModelContractError(ValueError):
    """A model callable or its inputs violate the declared dimensions."""


class ConfigError(ValueError):
    """Invalid run configuration or data file (maps to CLI exit code 2)."""


class NumericFailure(RuntimeError):
    """Numerical breakdown (non-finite values, factorization failure).

    Carries optional context identifying where the failure happened.
    """

    def __init__(self, message, *, origin=None, step=None):
        if origin is not None:
            message = f"{message} [window origin={origin}]"
        if step is not None:
            message = f"{message} [step={step}]"
        super().__init__(message)
        self.origin = origin
        self.step = step


class WeightFactorizationError(NumericFailure):
    """Q(theta) or R(theta) is not positive definite at the given theta."""


class EvaluationError(NumericFailure):
    """Too many windows failed during an objective evaluation."""
