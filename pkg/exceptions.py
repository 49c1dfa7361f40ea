"""
Multi-Perspective Anomaly Detection
Error hierarchy shared by the library and the command line
"""

from typing import Optional


class AnomalyDetectionError(Exception):
    """Base class for every error raised on purpose by this package"""

    exit_code = 5


class ConfigError(AnomalyDetectionError, ValueError):
    """Invalid configuration, hyperparameters or network specification"""

    exit_code = 2


class ShapeError(AnomalyDetectionError, ValueError):
    """Tensor shapes that do not fit an operation"""

    exit_code = 2


class DataError(AnomalyDetectionError, ValueError):
    """Unreadable, inconsistent or one-class-violating data"""

    exit_code = 3


class CheckpointError(AnomalyDetectionError):
    """Corrupt, truncated or incompatible checkpoint"""

    exit_code = 3


class NumericalError(AnomalyDetectionError, ArithmeticError):
    """NaN/Inf values or a solver that failed to converge"""

    exit_code = 4


class GraphError(AnomalyDetectionError, RuntimeError):
    """Misuse of the recorded computation graph"""

    exit_code = 5


class SeedRunError(AnomalyDetectionError):
    """An experiment failed for one particular seed"""

    def __init__(self, seed: int, cause: Exception):
        super().__init__(f"run with seed {seed} failed: {cause}")
        self.seed = seed
        self.cause = cause

    @property
    def exit_code(self) -> int:
        return getattr(self.cause, "exit_code", 5)


def exit_code_for(error: Optional[BaseException]) -> int:
    """Process exit code for an exception escaping a command"""
    if error is None:
        return 0
    return getattr(error, "exit_code", 5)
