"""Exception types shared across the package."""


class GroupPromptError(Exception):
    """Base class for package errors."""


class ShapeError(GroupPromptError, ValueError):
    pass


class ParameterError(GroupPromptError, ValueError):
    pass


class NumericError(GroupPromptError, ArithmeticError):
    pass


class StatisticsError(GroupPromptError, ValueError):
    pass


class GenerationError(GroupPromptError, RuntimeError):
    pass


class DatasetError(GroupPromptError, ValueError):
    """Malformed or inconsistent dataset directory."""


class CheckpointError(GroupPromptError, ValueError):
    """Checkpoint missing, unreadable or incompatible with the model."""


class DivergenceError(GroupPromptError, RuntimeError):
    pass
