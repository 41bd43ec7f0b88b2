"""
Shared utilities: console logging, error types, warning counters and output paths
"""
import os
from datetime import datetime
from dotenv import load_dotenv

import config

load_dotenv()

WARNING_COUNTERS = {}


class ScaleCommError(Exception):
    """Base class for all errors raised by this project"""


class DomainError(ScaleCommError):
    """Input lies outside the numeric domain of an operation"""


class StructuralError(ScaleCommError):
    """Shapes, lengths or graph structure are inconsistent"""


class ConfigError(ScaleCommError):
    """Run configuration is invalid"""


class MissingArtifactError(ScaleCommError):
    """A required checkpoint, buffer or report does not exist"""


class IncompatibleArtifactError(ScaleCommError):
    """An artifact exists but does not match the current configuration"""


class NumericalAbort(ScaleCommError):
    """Non-finite loss encountered during an update"""


def log(msg):
    """Log a timestamped message to console"""
    print(f"[{datetime.now().strftime('%Y-%m-%d %H:%M:%S')}] {msg}")


def warn_once(counter, msg):
    """
    Increment a named warning counter, logging only the first occurrence

    Args:
        counter: Counter name (e.g. 'empty_queue')
        msg: Message logged the first time the counter fires

    Returns:
        New counter value
    """
    WARNING_COUNTERS[counter] = WARNING_COUNTERS.get(counter, 0) + 1
    if WARNING_COUNTERS[counter] == 1:
        log(f"[WARNING] {msg}")
    return WARNING_COUNTERS[counter]


def reset_warning_counters():
    """Clear all warning counters"""
    WARNING_COUNTERS.clear()


def get_output_root():
    """Output root directory, overridable through the environment or a .env file"""
    load_dotenv(override=False)
    return os.getenv(config.OUTPUT_ROOT_ENV, config.DEFAULT_OUTPUT_ROOT)


def chunk(lst, size):
    """Split a list into chunks of specified size"""
    for i in range(0, len(lst), size):
        yield lst[i:i + size]
