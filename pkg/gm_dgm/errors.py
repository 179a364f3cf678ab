"""Exception hierarchy shared by every module of the package."""


class GmDgmError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(GmDgmError):
    """Operand shapes do not agree."""


class DomainError(GmDgmError):
    """An input lies outside the domain of a function (e.g. log of a non-positive value)."""


class ContractError(GmDgmError):
    """A caller broke a documented precondition."""


class NonFiniteError(GmDgmError):
    """A computation produced NaN or Inf."""


class NonFiniteGradientError(NonFiniteError):
    def __init__(self, parameter_name):
        super().__init__(f"non-finite gradient in parameter '{parameter_name}'")
        self.parameter_name = parameter_name


class ConfigurationError(GmDgmError):
    """Invalid configuration value. `field` names the offending key when known."""

    def __init__(self, message, field=None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


class ParseError(GmDgmError):
    """A file could not be parsed."""


class UndefinedScoreError(GmDgmError):
    """A score is not defined for the given input."""


class CheckpointError(GmDgmError):
    """A checkpoint is unreadable, incompatible or of the wrong model kind."""


class TrainingDivergedError(GmDgmError):
    def __init__(self, message, last_good_checkpoint=None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint
