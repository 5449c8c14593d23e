"""
Exception hierarchy for leakwatch.

Every error carries the exit code the CLI returns for it:
    1  usage / configuration
    2  data (parsing, alignment, gaps, contracts between modules)
    3  numeric (singular fits, degenerate sensors, training divergence)
"""

from typing import Optional, Sequence


class LeakwatchError(Exception):
    exit_code: int = 1


class ConfigError(LeakwatchError):
    exit_code = 1


class ValidationError(ConfigError):
    """A scenario spec or pipeline config violates its invariants."""


class DataError(LeakwatchError):
    exit_code = 2


class ParseError(DataError):
    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f'line {line}: {message}'
        super().__init__(message)
        self.line = line


class AlignmentError(DataError):
    pass


class GapError(DataError):
    pass


class RangeError(DataError):
    pass


class ContractError(DataError):
    """Inputs handed between modules do not agree (shapes, channels, sensor ids)."""


class NumericError(LeakwatchError):
    exit_code = 3


class SingularFitError(NumericError):
    def __init__(self, dependent_columns: Sequence[str]):
        self.dependent_columns = list(dependent_columns)
        super().__init__(
            'rank-deficient regression system; dependent columns: '
            + ', '.join(self.dependent_columns)
        )


class DegenerateSensorError(NumericError):
    def __init__(self, sensor_id: str, k1: float):
        self.sensor_id = sensor_id
        self.k1 = k1
        super().__init__(f'sensor {sensor_id!r} has degenerate slope k1={k1:.3e}')


class NonFiniteError(NumericError):
    def __init__(self, message: str, layer: Optional[int] = None):
        if layer is not None:
            message = f'layer {layer}: {message}'
        super().__init__(message)
        self.layer = layer


class TrainingError(NumericError):
    def __init__(self, message: str, fold: int, epoch: int):
        super().__init__(f'fold {fold}, epoch {epoch}: {message}')
        self.fold = fold
        self.epoch = epoch


class FalsePositiveAlarm(ValueError):
    """An alarm raised before the leak started has no time to detection."""
