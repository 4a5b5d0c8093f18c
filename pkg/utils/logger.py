"""
Structured logging for solver runs
"""

import logging
import sys
from typing import Any, Dict, Optional
from pathlib import Path
from logging.handlers import RotatingFileHandler
from pythonjsonlogger import jsonlogger
import numpy as np
from enum import Enum

from config import cfg

class QPLogger:
    """JSON file logging plus console output, one logger per purpose"""

    def __init__(self, name: str = "qpsolve", log_dir: str = cfg.log_dir):
        self.name = name
        self.log_dir = Path(log_dir)
        self.log_dir.mkdir(parents=True, exist_ok=True)

        self.system_logger = self._setup_logger(f"{name}_system", "system.log")
        self.run_logger = self._setup_logger(f"{name}_run", "runs.log")
        self.error_logger = self._setup_logger(f"{name}_error", "errors.log")

    def _setup_logger(self, logger_name: str, filename: str) -> logging.Logger:
        """Setup individual logger with JSON formatting and rotation"""
        logger = logging.getLogger(logger_name)
        logger.setLevel(logging.DEBUG)
        logger.propagate = False

        # Remove existing handlers
        logger.handlers = []

        file_handler = RotatingFileHandler(
            self.log_dir / filename,
            maxBytes=10 * 1024 * 1024,  # 10MB
            backupCount=5
        )
        formatter = jsonlogger.JsonFormatter(
            fmt='%(asctime)s %(name)s %(levelname)s %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        )
        file_handler.setFormatter(formatter)

        console_handler = logging.StreamHandler(sys.stdout)
        console_handler.setLevel(logging.INFO)
        console_handler.setFormatter(logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        ))

        logger.addHandler(file_handler)
        logger.addHandler(console_handler)
        return logger

    def _plain(self, data: Any) -> Any:
        """Convert numpy scalars/arrays so the JSON formatter can write them"""
        if isinstance(data, dict):
            return {str(k): self._plain(v) for k, v in data.items()}
        if isinstance(data, (list, tuple)):
            return [self._plain(v) for v in data]
        if isinstance(data, np.ndarray):
            return data.tolist()
        if isinstance(data, (np.integer, np.floating, np.bool_)):
            return data.item()
        if isinstance(data, Enum):
            return data.value
        return data

    def _extra(self, module: Optional[str], kwargs: Dict) -> Dict:
        return {"qp_module": module, "context": self._plain(kwargs) if kwargs else {}}

    def debug(self, message: str, module: str = None, **kwargs):
        self.system_logger.debug(message, extra=self._extra(module, kwargs))

    def info(self, message: str, module: str = None, **kwargs):
        self.system_logger.info(message, extra=self._extra(module, kwargs))

    def warning(self, message: str, module: str = None, **kwargs):
        self.system_logger.warning(message, extra=self._extra(module, kwargs))

    def error(self, message: str, module: str = None, exc_info: bool = True, **kwargs):
        """Log error message with traceback"""
        self.error_logger.error(message, exc_info=exc_info, extra=self._extra(module, kwargs))

    def critical(self, message: str, module: str = None, exc_info: bool = True, **kwargs):
        self.error_logger.critical(message, exc_info=exc_info, extra=self._extra(module, kwargs))

    def log_stage(self, stage: str, **metrics):
        """Record the outcome of one pipeline stage (conditions, solve, verify, dichotomy)"""
        self.run_logger.info(f"Stage {stage}", extra={"stage": stage, "metrics": self._plain(metrics)})

    def log_run(self, command: str, problem: str, exit_code: int, verdicts: Dict):
        """One record per CLI invocation"""
        record = {
            "command": command,
            "problem": problem,
            "exit_code": exit_code,
            "verdicts": self._plain(verdicts),
        }
        self.run_logger.info(f"Run {command} {problem} -> {exit_code}", extra=record)
        self.info(f"Run finished: {command} exit={exit_code}", module="app", **record)

# Singleton instance
logger = QPLogger()

# Convenience functions
debug = logger.debug
info = logger.info
warning = logger.warning
error = logger.error
critical = logger.critical
log_stage = logger.log_stage
log_run = logger.log_run
