import functools
import json
import logging
import sys
import time

import numpy as np

from constants import EXIT_FAILURE, EXIT_IO
from errors import PopflowError

logger = logging.getLogger(__name__)


# Custom filter - only run-level actions and problems go to the log file
class RunActionFilter(logging.Filter):
    def filter(self, record):
        if record.levelno >= logging.WARNING:  # Errors always
            return True
        # Only logs from the entry point and the command handlers
        return record.name in ("__main__", "popflow") or record.name.startswith("commands")


def record_run(func):
    """Decorator logging start and duration of a CLI command"""
    @functools.wraps(func)
    def wrapper(args, *a, **kwargs):
        run_logger = logging.getLogger(func.__module__)
        run_logger.info(f"Command {args.command} started")
        start = time.perf_counter()
        code = func(args, *a, **kwargs)
        run_logger.info(f"Command {args.command} finished in {format_duration(time.perf_counter() - start)}")
        return code
    return wrapper


def cli_overrides(args) -> dict:
    """Config overrides ({section: {key: value}}) from the --variant, --eps and --seed flags."""
    overrides = {}
    if getattr(args, "variant", None) is not None:
        overrides.setdefault("estimation", {})["variant"] = args.variant
    if getattr(args, "eps", None) is not None:
        overrides.setdefault("estimation", {})["eps"] = args.eps
    if getattr(args, "seed", None) is not None:
        overrides.setdefault("simulation", {})["seed"] = args.seed
    return overrides


def error_handler(err: BaseException, stream=None) -> int:
    """
    Log an exception, print a machine-readable error line and return the exit code.

    PopflowError subclasses carry their own exit code; plain OS errors map to
    the I/O code; anything else is unexpected and logged with a stack trace.
    """
    stream = stream if stream is not None else sys.stderr

    if isinstance(err, PopflowError):
        logger.error(f"{type(err).__name__}: {err.message}")
        payload = err.to_dict()
        code = err.exit_code
    elif isinstance(err, OSError):
        logger.error(f"I/O error: {err}")
        payload = {"error": type(err).__name__, "message": str(err)}
        code = EXIT_IO
    else:
        logger.exception("Unexpected error", exc_info=err)
        payload = {"error": type(err).__name__, "message": str(err)}
        code = EXIT_FAILURE

    payload["exit_code"] = code
    print(json.dumps(to_jsonable(payload), sort_keys=True), file=stream)
    return code


def to_jsonable(value):
    """Convert numpy scalars/arrays (possibly nested in dicts/lists) to plain JSON types."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def format_duration(seconds: float) -> str:
    if seconds < 1:
        return f"{seconds * 1000:.0f} ms"
    if seconds < 60:
        return f"{seconds:.1f} s"
    minutes, secs = divmod(seconds, 60)
    return f"{int(minutes)} min {secs:.0f} s"
