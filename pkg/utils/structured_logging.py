"""
Structured JSON logging for training, pool and verification events.
Provides a consistent format with required fields:
- service, action, status, message
- step, op_id (when the event belongs to a training step or an operation)
- error_type, error_message (in case of failure)
numpy scalars/arrays are converted so every payload is plain JSON.
"""

import json
import logging
import math
from datetime import datetime
from typing import Any, Optional

import numpy as np


def to_jsonable(value: Any) -> Any:
    """
    Convert numpy values (and containers of them) to JSON-native values.
    Non-finite floats become strings so the payload stays strict JSON.
    """
    if isinstance(value, np.ndarray):
        return [to_jsonable(v) for v in value.tolist()]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    return value


class StructuredLogger:
    """
    Structured logger for one service.
    Outputs JSON-formatted logs with consistent fields.
    """

    def __init__(self, service: str = "trainer", logger_name: str = "sage.trainer"):
        self.service = service
        self.logger = logging.getLogger(logger_name)

    def _log(
        self,
        level: int,
        action: str,
        status: str,
        message: str,
        step: Optional[int] = None,
        op_id: Optional[str] = None,
        error_type: Optional[str] = None,
        error_message: Optional[str] = None,
        **extra_fields
    ):
        if not self.logger.isEnabledFor(level):
            return

        log_data = {
            "timestamp": datetime.now().astimezone().isoformat(),
            "service": self.service,
            "action": action,
            "status": status,
            "message": message,
        }

        if step is not None:
            log_data["step"] = int(step)
        if op_id:
            log_data["op_id"] = op_id
        if error_type:
            log_data["error_type"] = error_type
        if error_message:
            log_data["error_message"] = error_message

        for key, value in extra_fields.items():
            log_data[key] = to_jsonable(value)

        self.logger.log(level, json.dumps(log_data))

    def debug(self, action: str, status: str = "success", message: str = "", **extra_fields):
        """Log debug message."""
        self._log(logging.DEBUG, action=action, status=status, message=message, **extra_fields)

    def info(
        self,
        action: str,
        status: str = "success",
        message: str = "",
        step: Optional[int] = None,
        op_id: Optional[str] = None,
        **extra_fields
    ):
        """
        Log informational message.

        Args:
            action: The operation being performed (e.g., "train_step", "transition", "probe")
            status: Status of the operation (default: "success")
            message: Human-readable message
            step: Training step the event belongs to
            op_id: Duality operation id
            **extra_fields: Additional fields to include in the log
        """
        self._log(
            logging.INFO,
            action=action,
            status=status,
            message=message,
            step=step,
            op_id=op_id,
            **extra_fields
        )

    def warning(
        self,
        action: str,
        status: str = "warning",
        message: str = "",
        step: Optional[int] = None,
        op_id: Optional[str] = None,
        **extra_fields
    ):
        """Log warning message."""
        self._log(
            logging.WARNING,
            action=action,
            status=status,
            message=message,
            step=step,
            op_id=op_id,
            **extra_fields
        )

    def error(
        self,
        action: str,
        message: str,
        error: Optional[Exception] = None,
        step: Optional[int] = None,
        op_id: Optional[str] = None,
        **extra_fields
    ):
        """
        Log error message.

        Args:
            action: The operation that failed
            message: Human-readable error message
            error: Exception object (if available)
            step: Training step
            op_id: Duality operation id
            **extra_fields: Additional fields
        """
        error_type = None
        error_message = None

        if error:
            error_type = type(error).__name__
            error_message = str(error)

        self._log(
            logging.ERROR,
            action=action,
            status="error",
            message=message,
            step=step,
            op_id=op_id,
            error_type=error_type,
            error_message=error_message,
            **extra_fields
        )


trainer_logger = StructuredLogger(service="trainer", logger_name="sage.trainer")
pool_logger = StructuredLogger(service="pool", logger_name="sage.pool")
theory_logger = StructuredLogger(service="theory", logger_name="sage.theory")
cli_logger = StructuredLogger(service="cli", logger_name="sage.cli")
