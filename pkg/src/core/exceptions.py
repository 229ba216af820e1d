from typing import Dict, Any
import traceback
from src.core.logging_config import get_logger

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

class LatentFusionException(Exception):
    """Base exception for the application"""
    def __init__(self, message: str, error_code: str = None, details: Dict[str, Any] = None):
        self.message = message
        self.error_code = error_code
        self.details = details or {}
        super().__init__(self.message)

class ConfigurationException(LatentFusionException):
    """Exception for invalid run configuration or command-line usage"""
    pass

class ShapeMismatchException(LatentFusionException):
    """Exception for tensors whose shapes do not match an operation's contract"""
    def __init__(self, op: str, expected, actual, message: str = None):
        super().__init__(
            message or f"{op}: shape mismatch, expected {tuple(expected)} but got {tuple(actual)}",
            error_code="SHAPE_MISMATCH",
            details={"op": op, "expected": list(expected), "actual": list(actual)},
        )

class ModalityMismatchException(LatentFusionException):
    """Exception for batches that lack a modality the model variant consumes"""
    pass

class NumericException(LatentFusionException):
    """Exception for non-finite values produced by a computation"""
    pass

class DatasetFormatException(LatentFusionException):
    """Exception for unreadable or inconsistent dataset directories"""
    pass

class CheckpointException(LatentFusionException):
    """Exception for unreadable or inconsistent checkpoints"""
    pass

class TrainingDivergedException(LatentFusionException):
    """Exception raised when the training loss stops being finite"""
    def __init__(self, message: str, last_good_step: int, details: Dict[str, Any] = None):
        super().__init__(message, error_code="DIVERGED", details=details)
        self.last_good_step = last_good_step

class EvaluationException(LatentFusionException):
    """Exception for evaluation errors"""
    pass

class RegressionException(LatentFusionException):
    """Exception for frozen-representation regression errors"""
    pass

class OracleFailure(LatentFusionException):
    """Exception for a validation oracle whose check did not pass"""
    pass

def exit_code_for(exc: Exception) -> int:
    """Map an exception to the CLI exit-code contract"""
    if isinstance(exc, ConfigurationException):
        return EXIT_USAGE
    if isinstance(exc, LatentFusionException):
        logger.error("command_failed",
                     error_code=exc.error_code,
                     message=exc.message,
                     details=exc.details)
        return EXIT_RUNTIME
    logger.error("Unhandled exception occurred",
                 exception=str(exc),
                 traceback=traceback.format_exc())
    return EXIT_RUNTIME
