import logging
import sys
from datetime import datetime, timezone
from typing import Any, Dict, Optional

from pydantic import BaseModel

from .config import settings


class LogRecord(BaseModel):
    timestamp: str
    level: str
    service: str
    event: str
    command: Optional[str] = None
    mode: Optional[str] = None
    seed: Optional[int] = None
    epoch: Optional[int] = None
    loss: Optional[float] = None
    key_loss: Optional[float] = None
    lr: Optional[float] = None
    partition: Optional[int] = None
    num_sets: Optional[int] = None
    prompt_rows: Optional[int] = None
    status: Optional[str] = None
    execution_time: Optional[float] = None
    error_type: Optional[str] = None
    error_message: Optional[str] = None
    exit_code: Optional[int] = None
    metadata: Optional[Dict[str, Any]] = None


class StructuredLogger:
    def __init__(self, name: str):
        self.logger = logging.getLogger(name)
        self.logger.setLevel(getattr(logging, settings.log_level.upper(), logging.INFO))

        # stdout carries tables and CSV, so records go to stderr
        if not self.logger.handlers:
            handler = logging.StreamHandler(sys.stderr)
            handler.setFormatter(logging.Formatter("%(message)s"))
            self.logger.addHandler(handler)
            self.logger.propagate = False

    def _log(self, level: int, event: str, **kwargs: Any) -> None:
        if not self.logger.isEnabledFor(level):
            return
        record = LogRecord(
            timestamp=datetime.now(timezone.utc).isoformat(),
            level=logging.getLevelName(level),
            service="sop2",
            event=event,
            **kwargs,
        )
        if settings.log_json:
            self.logger.log(level, record.model_dump_json(exclude_none=True))
        else:
            fields = record.model_dump(exclude_none=True, exclude={"timestamp", "service", "level", "event"})
            self.logger.log(level, "%s %s", event, " ".join(f"{k}={v}" for k, v in fields.items()))

    def info(self, event: str, **kwargs: Any) -> None:
        self._log(logging.INFO, event, **kwargs)

    def warning(self, event: str, **kwargs: Any) -> None:
        self._log(logging.WARNING, event, **kwargs)

    def error(self, event: str, **kwargs: Any) -> None:
        self._log(logging.ERROR, event, **kwargs)

    def debug(self, event: str, **kwargs: Any) -> None:
        self._log(logging.DEBUG, event, **kwargs)

    def log_epoch(self, epoch: int, loss: float, lr: float, mode: str, seed: int,
                  key_loss: float = 0.0) -> None:
        """Log one finished training epoch"""
        self.info("train_epoch", epoch=epoch, loss=loss, key_loss=key_loss, lr=lr, mode=mode, seed=seed)

    def log_partition(self, partition: int, num_sets: int, prompt_rows: int) -> None:
        self.debug("set_partition", partition=partition, num_sets=num_sets, prompt_rows=prompt_rows)

    def log_command(self, command: str, execution_time: float, status: str = "ok",
                    metadata: Optional[Dict[str, Any]] = None) -> None:
        """Log a finished CLI command"""
        self.info("command_finished", command=command, execution_time=execution_time,
                  status=status, metadata=metadata)

    def log_error(self, error_type: str, error_message: str, command: Optional[str] = None,
                  exit_code: Optional[int] = None) -> None:
        """Log error details"""
        self.error(
            "command_error",
            error_type=error_type,
            error_message=error_message,
            command=command,
            exit_code=exit_code,
        )


# Global logger instance
logger = StructuredLogger("sop2")
