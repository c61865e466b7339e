import logging
import os
import sys
from pathlib import Path
from typing import Optional

import coloredlogs

# Global variable to hold the single instance of AppLogger
_app_logger_instance: Optional["AppLogger"] = None

LOGGER_NAME = "SbiToolkit"


class AppLoggerError(Exception):
    """Custom exception for application logger errors."""
    pass


class AppLogger:
    """
    Manages the toolkit's logging system.
    Implements a singleton pattern so every engine (samplers, simulators,
    diagnostics, the CLI) writes through one consistently configured logger.
    """
    _instance = None
    _initialized = False

    def __new__(cls, *args, **kwargs):
        """Ensures that only one instance of AppLogger exists (Singleton pattern)."""
        if cls._instance is None:
            cls._instance = super(AppLogger, cls).__new__(cls)
        return cls._instance

    def __init__(self, log_dir: Optional[str] = None, log_level: int = logging.INFO, console: bool = True):
        """
        Initializes the AppLogger. Sets up the named logger, a file handler and
        a colored console handler. Designed to be called once at startup.

        Args:
            log_dir (str, optional): Directory for `toolkit.log`. Defaults to the
                                     SBI_TOOLKIT_LOG_DIR environment variable, then "logs".
            log_level (int): The minimum logging level to capture.
            console (bool): Whether to attach the console handler.
        """
        if self._initialized:
            return

        self.log_dir = Path(log_dir or os.environ.get("SBI_TOOLKIT_LOG_DIR", "logs"))
        self.log_dir.mkdir(parents=True, exist_ok=True)

        self.logger = logging.getLogger(LOGGER_NAME)
        self.logger.setLevel(log_level)
        self.logger.propagate = False # Prevent logs from going to the root logger

        # Clear existing handlers to prevent duplicate logs on re-initialization (e.g., during tests)
        for handler in list(self.logger.handlers):
            self.logger.removeHandler(handler)

        log_file_path = self.log_dir / "toolkit.log"
        try:
            file_handler = logging.FileHandler(log_file_path, encoding='utf-8')
            file_handler.setLevel(log_level)
            file_handler.setFormatter(logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s'))
            self.logger.addHandler(file_handler)
        except OSError as e:
            # Fallback to console if file logging fails (e.g., permissions)
            self.logger.addHandler(logging.StreamHandler(sys.stderr))
            self.logger.error(f"Failed to set up file logger at {log_file_path}. Logging to console instead.", exc_info=True)
            raise AppLoggerError(f"Failed to set up file logger: {e}")

        if console:
            # Console goes to stderr so CLI stdout stays clean for piping.
            console_handler = logging.StreamHandler(sys.stderr)
            console_handler.setLevel(log_level)
            console_handler.setFormatter(coloredlogs.ColoredFormatter('%(levelname)s - %(message)s'))
            self.logger.addHandler(console_handler)

        self._initialized = True
        self.logger.debug("AppLogger initialized successfully.")

    def get_logger(self) -> logging.Logger:
        """Returns the configured logging.Logger instance."""
        return self.logger

    def set_level(self, log_level: int):
        """Changes the level of the logger and all of its handlers."""
        self.logger.setLevel(log_level)
        for handler in self.logger.handlers:
            handler.setLevel(log_level)


def get_application_logger() -> logging.Logger:
    """
    Convenience function to get the global AppLogger's logging.Logger instance.
    Initializes the AppLogger with defaults if main.py (or a test fixture)
    has not done so explicitly.
    """
    global _app_logger_instance
    if _app_logger_instance is None:
        _app_logger_instance = AppLogger()
    return _app_logger_instance.get_logger()
