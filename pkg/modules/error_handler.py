import json
import logging
import traceback
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

from rich.logging import RichHandler

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'
LOG_DATEFMT = '%Y-%m-%d %H:%M:%S'


class ComalLabError(Exception):
    """Base class for every error raised by comal-lab"""


class ShapeError(ComalLabError):
    """Operand shapes do not fit the operation"""

    def __init__(self, operation: str, *shapes: Sequence[int], detail: str = ""):
        self.operation = operation
        self.shapes = [tuple(s) for s in shapes]
        shown = " vs ".join(str(s) for s in self.shapes)
        message = f"{operation}: incompatible shapes {shown}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class NumericError(ComalLabError):
    """An operation was asked for a value outside its domain"""

    def __init__(self, operation: str, detail: str):
        self.operation = operation
        super().__init__(f"{operation}: {detail}")


class NonFiniteError(ComalLabError):
    """A primitive or layer produced NaN or infinity"""

    def __init__(self, where: str, detail: str = ""):
        self.where = where
        message = f"non-finite values produced by {where}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class BackwardError(ComalLabError):
    """Reverse pass requested on something that cannot be differentiated"""


class ConfigError(ComalLabError):
    """Invalid configuration value or key"""


class PrerequisiteError(ComalLabError):
    """A training phase is missing a model or statistic it depends on"""

    def __init__(self, phase: str, missing: str):
        self.phase = phase
        self.missing = missing
        super().__init__(f"{phase} needs {missing}, which was not provided")


class DivergenceError(ComalLabError):
    """Training produced a non-finite loss"""

    def __init__(self, phase: str, iteration: int, value: float):
        self.phase = phase
        self.iteration = iteration
        self.value = value
        super().__init__(f"{phase} diverged at iteration {iteration} (loss={value})")


class DatasetError(ComalLabError):
    """Empty, malformed, or missing dataset input"""


class SerializationError(ComalLabError):
    """NDG1 / NDGC payload could not be written or parsed"""


def setup_logging(log_file: Optional[Path] = None, level: int = logging.INFO, console: bool = True) -> logging.Logger:
    """Configure the comal_lab logger hierarchy (file + rich console)"""
    root = logging.getLogger("modules")
    root.setLevel(level)
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()

    if log_file is not None:
        log_file = Path(log_file)
        log_file.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=LOG_DATEFMT))
        root.addHandler(file_handler)

    if console:
        root.addHandler(RichHandler(show_path=False, markup=False))

    root.propagate = False
    return root


class ErrorHandler:
    """
    Turns exceptions into log records and short messages for the terminal.

    Every error is written to the run log with its traceback and appended to
    ``logs/errors.json`` inside the run directory, so a failed experiment can be
    diagnosed after the console is gone.
    """

    def __init__(self, run_dir: Optional[Path] = None):
        self.run_dir = Path(run_dir) if run_dir else Path.cwd() / "runs"
        self.error_log_file = self.run_dir / "logs" / "errors.json"
        self.logger = logging.getLogger("modules.error_handler")
        self.friendly_messages = {
            "ShapeError": "Two inputs did not have matching shapes.",
            "NumericError": "A value fell outside the domain of an operation.",
            "NonFiniteError": "A computation produced NaN or infinity.",
            "BackwardError": "Gradients could not be computed for this loss.",
            "ConfigError": "The configuration contains an invalid key or value.",
            "PrerequisiteError": "A required model or statistic is missing for this phase.",
            "DivergenceError": "Training diverged; try a smaller learning rate.",
            "DatasetError": "The dataset is empty, malformed, or missing files.",
            "SerializationError": "A tensor file could not be read or written.",
            "FileNotFoundError": "A file or folder could not be found. Please check the path.",
            "PermissionError": "Permission denied while reading or writing run files.",
            "KeyboardInterrupt": "Interrupted by user.",
        }

    def handle_error(self, error: BaseException, context: str = "") -> Dict[str, Any]:
        """Log an error and build the user-facing summary"""
        error_type = type(error).__name__
        error_info = {
            "timestamp": datetime.now().isoformat(),
            "error_type": error_type,
            "error_message": str(error),
            "context": context,
            "traceback": traceback.format_exc(),
        }
        self.log_error(error_info)

        return {
            "success": False,
            "error_type": error_type,
            "user_message": self.generate_user_friendly_message(error_type, context),
            "technical_details": str(error),
        }

    def log_error(self, error_info: Dict[str, Any]):
        """Log error to the logger and the JSON error file"""
        self.logger.error(f"{error_info['error_type']}: {error_info['error_message']} | Context: {error_info['context']}")

        records = self._load_records()
        records.append(error_info)
        self.error_log_file.parent.mkdir(parents=True, exist_ok=True)
        with open(self.error_log_file, 'w') as f:
            json.dump(records, f, indent=2)

    def generate_user_friendly_message(self, error_type: str, context: str = "") -> str:
        """Generate a short message for the terminal"""
        base_message = self.friendly_messages.get(error_type, "An unexpected error occurred.")
        if context:
            return f"{base_message} (Context: {context})"
        return base_message

    def get_error_statistics(self) -> Dict[str, Any]:
        """Get error counts by type and the most recent entries"""
        records = self._load_records()
        error_counts: Dict[str, int] = {}
        for record in records:
            error_counts[record["error_type"]] = error_counts.get(record["error_type"], 0) + 1

        return {
            "total_errors": len(records),
            "error_types": error_counts,
            "recent_errors": [f"{r['error_type']}: {r['error_message']}" for r in records[-10:]],
        }

    def _load_records(self):
        if not self.error_log_file.exists():
            return []
        try:
            with open(self.error_log_file, 'r') as f:
                return json.load(f)
        except (json.JSONDecodeError, OSError):
            return []
