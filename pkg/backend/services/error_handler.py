"""
Error handling & logging service
Centralized error handling for the CAUSTICA renderer
"""

import logging
import os
import traceback
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional

# Logger setup
LOG_LEVEL = os.getenv("CAUSTICA_LOG_LEVEL", "INFO").upper()
LOG_DIR = os.getenv("CAUSTICA_LOG_DIR")

_handlers: list[logging.Handler] = [logging.StreamHandler()]
if LOG_DIR:
    Path(LOG_DIR).mkdir(parents=True, exist_ok=True)
    _handlers.append(
        logging.FileHandler(Path(LOG_DIR) / "caustica.log", encoding="utf-8")
    )

logging.basicConfig(
    level=getattr(logging, LOG_LEVEL, logging.INFO),
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    handlers=_handlers,
)

logger = logging.getLogger("caustica")


def get_logger(name: str) -> logging.Logger:
    """Child logger under the `caustica` namespace (services.gmath -> caustica.gmath)."""
    return logger.getChild(name.rsplit(".", 1)[-1])


class CausticaException(Exception):
    """Base exception for CAUSTICA"""

    def __init__(self, message: str, code: str = "UNKNOWN_ERROR"):
        self.message = message
        self.code = code
        super().__init__(self.message)


class ConfigError(CausticaException, ValueError):
    """Invalid render configuration"""

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message, code="CONFIG_ERROR")
        self.field = field


class SceneError(CausticaException):
    """Scene file could not be parsed"""

    def __init__(
        self,
        message: str,
        line: Optional[int] = None,
        column: Optional[int] = None,
        path: Optional[str] = None,
    ):
        where = ""
        if path:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
            if column is not None:
                where += f":{column}"
        super().__init__(
            f"{where}: {message}" if where else message, code="SCENE_PARSE_ERROR"
        )
        self.line = line
        self.column = column
        self.path = path


class SceneValidationError(CausticaException):
    """Scene parsed but violates a Scene invariant"""

    def __init__(self, invariant: str, message: str):
        super().__init__(f"[{invariant}] {message}", code="SCENE_INVALID")
        self.invariant = invariant


class GuidingError(CausticaException, ValueError):
    """Invalid parameters passed to the guiding math, optimizer or samplers"""

    def __init__(self, message: str):
        super().__init__(message, code="GUIDING_ERROR")


class ImageError(CausticaException, ValueError):
    """Image dimension mismatch or malformed image file"""

    def __init__(self, message: str):
        super().__init__(message, code="IMAGE_ERROR")


def log_error(error: Exception, context: Optional[Dict[str, Any]] = None):
    """
    Logs an error with context.

    Args:
        error: Exception object
        context: Additional context (dict)
    """
    error_info = {
        "error_type": type(error).__name__,
        "error_message": str(error),
        "traceback": traceback.format_exc(),
        "timestamp": datetime.now().isoformat(),
        "context": context or {},
    }
    if isinstance(error, CausticaException):
        error_info["code"] = error.code

    logger.error(f"Error occurred: {error_info}")


def exit_code_for(error: BaseException) -> int:
    """CLI exit code: 2 for domain errors, 1 for anything else."""
    if isinstance(error, CausticaException) and error.code != "UNEXPECTED_ERROR":
        return 2
    return 1


def safe_call(func, *args, **kwargs):
    """
    Calls func with error handling.

    Domain errors are logged and returned as-is; anything else is wrapped in a
    CausticaException with code UNEXPECTED_ERROR.

    Returns:
        Tuple (result, error)
    """
    try:
        return func(*args, **kwargs), None
    except CausticaException as e:
        log_error(e, context={"function": getattr(func, "__name__", repr(func))})
        return None, e
    except Exception as e:
        error = CausticaException(f"Unexpected error: {e}", code="UNEXPECTED_ERROR")
        error.__cause__ = e
        log_error(error, context={"function": getattr(func, "__name__", repr(func))})
        return None, error
