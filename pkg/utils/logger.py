"""
Logger utility for solver runs, rank workers and test execution.
"""

import logging
import os
from datetime import datetime
from pathlib import Path


class RankAdapter(logging.LoggerAdapter):
    """
    Prefixes every record with the emitting rank, e.g. ``[rank 2/8]``.
    """

    def process(self, msg, kwargs):
        rank = self.extra.get("rank")
        size = self.extra.get("size")
        if rank is None:
            return msg, kwargs
        return f"[rank {rank}/{size}] {msg}", kwargs


class RunLogger:
    """
    Utility class for logging solver runs.

    Wraps the named stdlib logger ``VortexFMM`` with a detailed file handler
    and a short console handler. Library modules take child loggers from
    the shared instance so their records carry the module name.
    """

    ROOT_NAME = "VortexFMM"

    def __init__(self, log_dir="results/logs", log_level=logging.DEBUG, console_level=logging.INFO):
        """
        Initialize RunLogger.

        Args:
            log_dir: Directory to save log files
            log_level: Level of the file handler
            console_level: Level of the console handler
        """
        self.log_dir = log_dir
        self.log_level = log_level
        self.console_level = console_level

        Path(log_dir).mkdir(parents=True, exist_ok=True)

        self.logger = self._setup_logger()

    def _setup_logger(self):
        """
        Setup and configure the logger.

        Returns:
            logging.Logger: Configured logger instance
        """
        logger = logging.getLogger(self.ROOT_NAME)
        logger.setLevel(self.log_level)

        # Clear any existing handlers
        logger.handlers.clear()

        detailed_formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        )

        simple_formatter = logging.Formatter(
            '%(asctime)s - %(levelname)s - %(message)s',
            datefmt='%H:%M:%S'
        )

        timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
        log_file = os.path.join(self.log_dir, f"run_{timestamp}.log")

        file_handler = logging.FileHandler(log_file, encoding='utf-8')
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(detailed_formatter)

        console_handler = logging.StreamHandler()
        console_handler.setLevel(self.console_level)
        console_handler.setFormatter(simple_formatter)

        logger.addHandler(file_handler)
        logger.addHandler(console_handler)

        logger.debug(f"Logger initialized. Log file: {log_file}")
        self.log_file = log_file

        return logger

    def child(self, name, rank=None, size=None):
        """
        Get a module logger under the run logger.

        Args:
            name: Module name (e.g. 'traversal')
            rank: Rank id when called from a rank worker
            size: Total rank count

        Returns:
            logging.LoggerAdapter: Logger that prefixes the rank when given
        """
        return RankAdapter(self.logger.getChild(name), {"rank": rank, "size": size})

    def debug(self, message, **kwargs):
        """Log debug message."""
        self.logger.debug(message, extra=kwargs)

    def info(self, message, **kwargs):
        """Log info message."""
        self.logger.info(message, extra=kwargs)

    def warning(self, message, **kwargs):
        """Log warning message."""
        self.logger.warning(message, extra=kwargs)

    def error(self, message, exception=None, **kwargs):
        """
        Log error message.

        Args:
            message: Error message
            exception: Exception object (optional)
        """
        if exception:
            self.logger.error(f"{message} - Exception: {str(exception)}", exc_info=True, extra=kwargs)
        else:
            self.logger.error(message, extra=kwargs)

    def log_run_start(self, run_name):
        """
        Log the start of a run or test.

        Args:
            run_name: Name of the run
        """
        self.info("=" * 80)
        self.info(f"RUN START: {run_name}")
        self.info("=" * 80)

    def log_run_end(self, run_name, status="PASSED"):
        """
        Log the end of a run or test.

        Args:
            run_name: Name of the run
            status: Final status (PASSED, FAILED, SKIPPED, DONE)
        """
        self.info("-" * 80)
        self.info(f"RUN END: {run_name} - Status: {status}")
        self.info("=" * 80)

    def log_metric(self, name, value, unit=""):
        """
        Log a scalar measurement at debug level.

        Args:
            name: Metric name
            value: Measured value
            unit: Optional unit suffix
        """
        suffix = f" {unit}" if unit else ""
        self.debug(f"Metric: {name} = {value:.6g}{suffix}")

    def log_verification(self, description, result):
        """
        Log a verification result.

        Args:
            description: Description of what was verified
            result: Verification result (True/False)
        """
        status = "PASS" if result else "FAIL"
        message = f"Verification [{status}]: {description}"

        if result:
            self.info(message)
        else:
            self.error(message)


# Global logger instance
_run_logger = None


def get_logger(log_dir=None):
    """
    Get the global RunLogger instance.

    Args:
        log_dir: Log directory used when the instance is first created;
            falls back to $VFMM_LOG_DIR, then the "logging" section of data/config.json

    Returns:
        RunLogger: Global logger instance
    """
    global _run_logger

    if _run_logger is None:
        from utils.config_manager import get_config_manager

        try:
            settings = get_config_manager().get_config().get("logging", {})
        except FileNotFoundError:
            settings = {}
        directory = log_dir or os.environ.get("VFMM_LOG_DIR") or settings.get("directory", "results/logs")
        console_level = logging.getLevelName(str(settings.get("console_level", "INFO")).upper())
        if not isinstance(console_level, int):
            console_level = logging.INFO
        _run_logger = RunLogger(log_dir=directory, console_level=console_level)

    return _run_logger
