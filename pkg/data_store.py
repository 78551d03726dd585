"""
data_store.py - CSV / JSON record persistence and matrix files.
"""

import json
import logging
import os
from dataclasses import asdict, is_dataclass
from enum import Enum

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)


def ensure_output_dir(path):
    """Create the parent directory of `path` if it doesn't exist."""
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _plain(value):
    # Enums and numpy scalars become JSON/CSV-friendly values
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, dict):
        return {str(_plain(k)): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, frozenset, set)):
        items = sorted(value) if isinstance(value, (set, frozenset)) else value
        return [_plain(v) for v in items]
    return value


def record_dict(record):
    """Dataclass or mapping -> plain dict in field order."""
    if is_dataclass(record):
        record = asdict(record)
    return {k: _plain(v) for k, v in dict(record).items()}


def write_records(records, path, columns=None):
    """
    Write a list of records to CSV or JSON, chosen by the file extension.

    Args:
        records: dataclass instances or dicts
        path: output path ending in .csv or .json
        columns: CSV column order (defaults to the first record's fields)

    Returns:
        Number of records written
    """
    rows = [record_dict(r) for r in records]
    ensure_output_dir(path)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".csv":
        frame = pd.DataFrame(rows, columns=columns)
        frame.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")
    elif ext == ".json":
        write_json(rows, path)
    else:
        raise ValueError(f"unsupported output extension {ext!r} (use .csv or .json)")
    logger.info("Wrote %d records to %s", len(rows), path)
    return len(rows)


def write_frame(frame, path):
    """Write a DataFrame as CSV (LF endings, no index)."""
    ensure_output_dir(path)
    frame.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")
    logger.info("Wrote %d rows to %s", len(frame), path)


def write_json(payload, path):
    ensure_output_dir(path)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(_plain(payload), f, indent=2)
        f.write("\n")


def load_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def load_matrix(path):
    """
    Read a 2-D float32 matrix from .npy or headerless .csv.

    Returns:
        np.ndarray of shape (rows, cols)
    """
    ext = os.path.splitext(path)[1].lower()
    if ext == ".npy":
        m = np.load(path, allow_pickle=False)
    elif ext == ".csv":
        m = pd.read_csv(path, header=None).to_numpy()
    else:
        raise ValueError(f"unsupported matrix extension {ext!r} (use .npy or .csv)")
    m = np.asarray(m, dtype=np.float32)
    if m.ndim != 2:
        raise ValueError(f"{path}: expected a 2-D matrix, got shape {m.shape}")
    logger.debug("Loaded %s matrix from %s", m.shape, path)
    return m


def save_matrix(m, path):
    """Write a matrix as .npy or headerless .csv."""
    ensure_output_dir(path)
    ext = os.path.splitext(path)[1].lower()
    m = np.asarray(m, dtype=np.float32)
    if ext == ".npy":
        np.save(path, m)
    elif ext == ".csv":
        pd.DataFrame(m).to_csv(path, header=False, index=False, lineterminator="\n",
                               float_format="%.9g")
    else:
        raise ValueError(f"unsupported matrix extension {ext!r} (use .npy or .csv)")
    logger.info("Saved %s matrix to %s", m.shape, path)
