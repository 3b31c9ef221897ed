class FedDAHError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(FedDAHError, ValueError):
    pass


class UsageError(FedDAHError, ValueError):
    pass


class RegistrationError(FedDAHError, KeyError):
    pass


class ProtocolError(FedDAHError):
    pass


class NonFiniteError(FedDAHError, FloatingPointError):
    pass


class OptimizationDivergedError(NonFiniteError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class TrainingDivergedError(NonFiniteError):
    pass
