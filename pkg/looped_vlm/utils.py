"""
Utility functions for looped_vlm.
"""

import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

from .errors import ConfigError, DataError


def parse_r_list(text: str, r_max: Optional[int] = None) -> List[int]:
    """
    Parse a comma-separated list of recurrence depths.

    Args:
        text: e.g. "1,4,8,16"
        r_max: Upper bound; larger values are rejected

    Returns:
        The depths in the given order

    Raises:
        ConfigError: If an entry is not a positive integer or exceeds r_max
    """
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"Invalid r list: {text!r}")
    if not values:
        raise ConfigError("r list is empty")
    for r in values:
        if r < 1:
            raise ConfigError(f"Recurrence depth must be >= 1, got {r}")
        if r_max is not None and r > r_max:
            raise ConfigError(f"Recurrence depth {r} exceeds r_max {r_max}")
    return values


def parse_labeled_paths(specs: List[str]) -> Dict[str, Path]:
    """
    Parse LABEL=PATH pairs (a bare PATH is labelled by its parent directory name).

    Raises:
        ConfigError: On duplicate labels
    """
    out: Dict[str, Path] = {}
    for spec in specs:
        label, sep, path = spec.partition("=")
        if not sep:
            path = label
            label = Path(path).parent.name or Path(path).stem
        if label in out:
            raise ConfigError(f"Duplicate checkpoint label: {label}")
        out[label] = Path(path)
    return out


def array_checksum(values: np.ndarray) -> str:
    """sha256 of an array's little-endian bytes, dtype and shape."""
    values = np.ascontiguousarray(values)
    digest = hashlib.sha256()
    digest.update(str((values.dtype.str, values.shape)).encode("ascii"))
    digest.update(values.astype(values.dtype.newbyteorder("<")).tobytes())
    return digest.hexdigest()


def read_jsonl(path: Union[str, Path]) -> List[Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"File not found: {path}")
    rows = []
    with path.open("r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rows.append(json.loads(line))
    return rows
