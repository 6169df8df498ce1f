"""
Exceptions raised by attackprofiling.

Internal invariants use plain ``assert``; everything a caller can trigger
with bad input raises one of these.
"""


class AttackProfilingError(Exception):
    pass


class DimensionError(AttackProfilingError, ValueError):
    pass


class ConfigurationError(AttackProfilingError, ValueError):
    pass


class ContractError(AttackProfilingError, ValueError):
    pass


class NumericError(AttackProfilingError, ArithmeticError):
    pass


class TrainingError(AttackProfilingError, RuntimeError):
    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = '{} (iteration {})'.format(message, iteration)
        super().__init__(message)
        self.iteration = iteration


class AttackInitError(AttackProfilingError, RuntimeError):
    pass


class QueryBudgetExceeded(AttackProfilingError, RuntimeError):
    pass


class FormatError(AttackProfilingError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = '{} at byte offset {}'.format(message, offset)
        super().__init__(message)
        self.offset = offset


class EvaluationError(AttackProfilingError, RuntimeError):
    pass


class LeakageError(EvaluationError):
    """Evaluated clean images were used for training."""
    pass
