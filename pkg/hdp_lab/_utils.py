"""Internal utility functions for hdp-lab.

This module provides private helper functions used internally across the
library. These functions are not part of the public API and may change
without notice.
"""

from pathlib import Path
from typing import Any, Dict
import hashlib
import json
import re

import numpy as np

# Stream tags mixed into derived seeds so that data, training, UAP and buffer
# randomness never share a stream.
SEED_DATA = 0
SEED_TRAIN = 1
SEED_UAP = 2
SEED_BUFFER = 3
SEED_INIT = 4

_KV_LINE_RE = re.compile(r"^(?P<key>[A-Za-z0-9_.-]+)\s*=\s*(?P<value>.*)$")


def _derive_seed(*keys: int) -> int:
    """Derive a 32-bit seed from a tuple of non-negative integers.

    The tuple is hashed with numpy's SeedSequence, so nearby tuples give
    unrelated seeds and the mapping is identical on every platform.

    Args:
        *keys: Non-negative integers, e.g. (global_seed, stage_id, role, index).

    Returns:
        A seed in [0, 2**32).

    Raises:
        ValueError: If any key is negative.
    """
    if any(k < 0 for k in keys):
        raise ValueError(f"Seed keys must be non-negative, got {keys}")
    return int(np.random.SeedSequence(list(keys)).generate_state(1, dtype=np.uint32)[0])


def _config_hash(payload: Dict[str, Any]) -> str:
    """Stable short hash of a JSON-serializable configuration dictionary."""
    blob = json.dumps(payload, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def _read_kv_config(path: str | Path) -> Dict[str, str]:
    """Parse a flat key=value configuration file.

    Blank lines and lines starting with '#' are skipped. Keys mirror CLI flag
    names without the leading dashes; '-' and '_' are interchangeable.

    Args:
        path: Config file path.

    Returns:
        Dictionary of normalized keys (underscores) to raw string values.

    Raises:
        ValueError: If a non-comment line is not of the form key=value.
    """
    result = {}
    for lineno, raw in enumerate(Path(path).expanduser().read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        match = _KV_LINE_RE.match(line)
        if not match:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        result[match.group("key").replace("-", "_")] = match.group("value").strip()
    return result


def _parse_bool(value: str | bool) -> bool:
    """Interpret common textual booleans from config files."""
    if isinstance(value, bool):
        return value
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"Not a boolean: {value!r}")
