"""
Utility functions for environment configuration, file handling and logging.
Also houses the error types shared by every module.
"""
import os
import json
import logging
from pathlib import Path
from typing import Optional, Dict, Any, List
from dotenv import load_dotenv
import pandas as pd

# Load environment variables
load_dotenv()


class ArgumentError(ValueError):
    """Invalid argument: bad shape, axis, range or missing value."""


class ConfigurationError(ValueError):
    """Invalid configuration value or unusable derived state."""


class TrainingError(RuntimeError):
    """Non-finite loss or gradient encountered while training."""


class CheckpointFormatError(ValueError):
    """Checkpoint or prototype container could not be decoded."""


class DatasetError(OSError):
    """Dataset file could not be read or written."""


def get_env_variable(var_name: str, default: Optional[str] = None) -> str:
    """
    Retrieve environment variable with optional default value.

    Args:
        var_name: Name of the environment variable
        default: Default value if variable is not found

    Returns:
        Value of the environment variable or default
    """
    value = os.getenv(var_name, default)
    if value is None:
        raise ConfigurationError(f"Environment variable '{var_name}' not found and no default provided")
    return value


def env_flag(var_name: str, default: bool = True) -> bool:
    """Read a boolean environment flag ("1"/"0", "true"/"false")."""
    value = get_env_variable(var_name, "1" if default else "0")
    return value.strip().lower() in ("1", "true", "yes", "on")


_LOGGING_CONFIGURED = False


def get_logger(name: str) -> logging.Logger:
    """
    Return a module logger, configuring the root handler once from DDB_LOG_LEVEL.

    Args:
        name: Logger name, usually ``__name__``

    Returns:
        Configured logger
    """
    global _LOGGING_CONFIGURED
    if not _LOGGING_CONFIGURED:
        level = get_env_variable("DDB_LOG_LEVEL", "INFO").upper()
        logging.basicConfig(
            level=getattr(logging, level, logging.INFO),
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        _LOGGING_CONFIGURED = True
    return logging.getLogger(name)


def validate_file_extension(file_path: str, allowed_extensions: list) -> bool:
    """
    Validate if a file has an allowed extension.

    Args:
        file_path: Path to the file
        allowed_extensions: List of allowed extensions (e.g., ['.ppm', '.pgm'])

    Returns:
        True if extension is allowed, False otherwise
    """
    file_extension = Path(file_path).suffix.lower()
    return file_extension in [ext.lower() for ext in allowed_extensions]


def save_json(data: Dict[Any, Any], file_path: str) -> None:
    """
    Save dictionary data to a JSON file.

    Keys are sorted so that identical data always produces identical bytes.

    Args:
        data: Dictionary to save
        file_path: Path where JSON file should be saved
    """
    with open(file_path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(data, f, indent=2, ensure_ascii=False, sort_keys=True)
        f.write('\n')


def load_json(file_path: str) -> Dict[Any, Any]:
    """
    Load data from a JSON file.

    Args:
        file_path: Path to the JSON file

    Returns:
        Dictionary containing the JSON data
    """
    try:
        with open(file_path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except OSError as e:
        raise DatasetError(f"Could not read {file_path}: {e}") from e


def ensure_directory_exists(directory_path: str) -> None:
    """
    Ensure a directory exists, creating it if necessary.

    Args:
        directory_path: Path to the directory
    """
    os.makedirs(directory_path, exist_ok=True)


def format_miou(value: float) -> str:
    """Format an IoU-like fraction as percentage points."""
    if value != value:  # NaN
        return "n/a"
    return f"{100.0 * value:.2f}"


class StepLogger:
    """
    Append-only CSV log for per-step training scalars.

    The header row is written when the first rows are flushed; later flushes
    append without a header.
    """

    def __init__(self, file_path: Optional[str], columns: List[str], flush_every: int = 50):
        self.file_path = file_path
        self.columns = list(columns)
        self.flush_every = flush_every
        self._rows: List[Dict[str, Any]] = []
        self._header_written = False
        self.history: List[Dict[str, Any]] = []
        if file_path is not None:
            ensure_directory_exists(str(Path(file_path).parent))
            if os.path.exists(file_path):
                os.remove(file_path)

    def log(self, **row: Any) -> None:
        """Record one row; keys must match the declared columns."""
        missing = set(self.columns) - set(row)
        if missing:
            raise ArgumentError(f"Step log row missing columns: {sorted(missing)}")
        self._rows.append(row)
        self.history.append(row)
        if len(self._rows) >= self.flush_every:
            self.flush()

    def flush(self) -> None:
        if self.file_path is None or not self._rows:
            self._rows = []
            return
        df = pd.DataFrame(self._rows, columns=self.columns)
        df.to_csv(
            self.file_path,
            mode='a',
            header=not self._header_written,
            index=False,
            lineterminator='\n',
        )
        self._header_written = True
        self._rows = []

    def close(self) -> None:
        if self.file_path is not None and not self._header_written and not self._rows:
            # Empty stage still gets its header row.
            pd.DataFrame(columns=self.columns).to_csv(self.file_path, index=False, lineterminator='\n')
            self._header_written = True
        self.flush()
