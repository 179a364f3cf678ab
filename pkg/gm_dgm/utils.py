import json
import os
import sys
import tempfile
import time
from contextlib import contextmanager

import numpy as np
import pandas as pd
from dotenv import dotenv_values

from . import DATA_DIR
from .errors import ParseError

_QUIET = False


def set_quiet(quiet):
    """Silence (or re-enable) status lines printed through `status`."""
    global _QUIET
    _QUIET = bool(quiet)


def status(message):
    """Print a status line unless quiet mode is on"""
    if not _QUIET:
        print(message)


def warn_status(message):
    if not _QUIET:
        print(f"⚠️ {message}", file=sys.stderr)


def format_duration(seconds):
    """Format seconds as 'Xm Ys'."""
    minutes = int(seconds // 60)
    seconds = int(seconds % 60)
    return f"{minutes}m {seconds}s"


@contextmanager
def timed():
    """Yield a callable returning the elapsed wall time in seconds."""
    start = time.time()
    yield lambda: time.time() - start


def resolve_path(filename):
    """
    Resolve a filename against the data directory

    Params:
        filename (str): Absolute path, path already inside DATA_DIR, or a bare name

    Returns:
        str: The resolved path
    """
    if os.path.isabs(filename) or os.path.dirname(filename) == DATA_DIR or os.path.exists(filename):
        return filename
    return os.path.join(DATA_DIR, filename)


@contextmanager
def atomic_write(path, mode="w"):
    """
    Write a file via a temporary sibling and rename it into place on success.

    Readers never observe a partially written file: if the body raises, the
    temporary file is removed and `path` is left untouched.
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, mode) as f:
            yield f
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def load_data_from_json(filename):
    """
    Load data from a JSON file

    Params:
        filename (str): The filename to load from

    Returns:
        dict: The loaded data

    Raises:
        ParseError: if the file is missing or not valid JSON
    """
    filepath = resolve_path(filename)
    try:
        with open(filepath, "r") as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise ParseError(f"File {filepath} not found.") from e
    except json.JSONDecodeError as e:
        raise ParseError(f"Error decoding JSON from {filepath}: {e}") from e


def save_data_to_json(data, filename):
    """
    Save data to a JSON file

    Params:
        data (dict): The data to save
        filename (str): The filename to save to

    Returns:
        str: The path written
    """
    filepath = resolve_path(filename)
    with atomic_write(filepath) as f:
        json.dump(data, f, indent=2, sort_keys=True)
    return filepath


def write_key_values(data, path, header=None):
    """Write an ordered mapping as `key=value` lines (the config/manifest text format)."""
    with atomic_write(path) as f:
        if header:
            for line in header.splitlines():
                f.write(f"# {line}\n")
        for key, value in data.items():
            f.write(f"{key}={_format_value(value)}\n")
    return path


def read_key_values(path, interpolate=False):
    """
    Read a `key=value` text file

    Params:
        path (str): File to read
        interpolate (bool): Expand ${VAR} references from the environment

    Returns:
        dict: Keys mapped to raw string values (empty string for bare keys)
    """
    if not os.path.exists(path):
        raise ParseError(f"File {path} not found.")
    values = dotenv_values(path, interpolate=interpolate)
    return {key: ("" if value is None else value) for key, value in values.items()}


def _format_value(value):
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    if value is None:
        return ""
    if hasattr(value, "value"):  # enums
        return str(value.value)
    return str(value)


def write_csv(frame, path, index=False):
    """Write a DataFrame as CSV, atomically."""
    with atomic_write(path) as f:
        frame.to_csv(f, index=index, lineterminator="\n")
    return path


def read_csv(path, **kwargs):
    if not os.path.exists(path):
        raise ParseError(f"File {path} not found.")
    try:
        return pd.read_csv(path, **kwargs)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ParseError(f"Error reading CSV {path}: {e}") from e
