import importlib
import logging
import traceback
from dataclasses import dataclass, field
from datetime import datetime

logger = logging.getLogger("a2mt")


class _dict(dict):
    """dict with attribute access, used for resolved settings sections"""

    def __getattr__(self, key):
        try:
            return self[key]
        except KeyError:
            raise AttributeError(key)

    def __setattr__(self, key, value):
        self[key] = value

    def copy(self):
        return _dict(dict(self).copy())


def get_traceback():
    return traceback.format_exc()


@dataclass
class ErrorLog:
    title: str
    message: str
    created: str = field(default_factory=lambda: datetime.now().isoformat(timespec="seconds"))


def log_error(title, message=None, logger_name=None):
    """
    Log an error with a short title and a body (usually a traceback).
    Returns the ErrorLog record so callers can attach it to their results.
    """
    message = message or get_traceback()
    logging.getLogger(logger_name or "a2mt").error("%s\n%s", title, message)
    return ErrorLog(title=title, message=message)


def get_attr(dotted_path):
    """Resolve 'package.module.attr[.attr]' to the attribute."""
    parts = dotted_path.split(".")
    for i in range(len(parts) - 1, 0, -1):
        try:
            obj = importlib.import_module(".".join(parts[:i]))
        except ModuleNotFoundError:
            continue
        for attr in parts[i:]:
            obj = getattr(obj, attr)
        return obj
    raise ImportError(f"cannot resolve {dotted_path!r}")


def run_guarded(fn, *args, title=None, **kwargs):
    """
    Run a pipeline stage with consistent error handling & logging.
    Returns: (result, error)
    """
    result, error = None, None
    try:
        result = fn(*args, **kwargs)
    except Exception as e:
        log = log_error(
            title=title or f"{getattr(fn, '__name__', 'stage')} failed",
            message=get_traceback(),
        )
        error = f"{log.title}: {e}"
    return result, error
