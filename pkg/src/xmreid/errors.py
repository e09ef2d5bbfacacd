"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration values or unknown configuration keys."""


class FormatError(RuntimeError):
    """On-disk data does not match its declared format."""


class SamplingError(RuntimeError):
    """Batch sampling preconditions are not met."""


class ContractError(ValueError):
    """An operation was called with arguments that violate its contract."""


class ModelError(RuntimeError):
    """Model, checkpoint and configuration do not fit together."""


class ProtocolError(RuntimeError):
    """Evaluation protocol preconditions are not met."""


class NumericalError(RuntimeError):
    """Non-finite values were produced where finite ones are required."""


class TrainingAbort(RuntimeError):
    """Training stopped on a non-finite loss; carries the offending batch."""

    def __init__(self, message, batch_indices=None, report=None):
        super().__init__(message)
        self.batch_indices = list(batch_indices) if batch_indices is not None else None
        self.report = report
