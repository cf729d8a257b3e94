"""Grid helpers shared by the sweep DAG and the command line.

A grid maps a sweep key to the list of values to try; the sweep runs the cartesian
product of all keys in the order given.

Sweep Keys:
    - sigma, epsilon, alpha: UAP generation settings
    - beta, buffer, seed, epochs: training settings
    - components: HDP terms to enable, letters over E (pseudo entropy),
      P (pseudo distillation), R (real distillation), or 'none'
"""

from itertools import product
from typing import Any, Dict, List
import re

from hdp_lab.trainer import TrainConfig

SWEEP_KEYS = ('sigma', 'epsilon', 'alpha', 'beta', 'buffer', 'seed', 'epochs', 'components')

_COMPONENTS_RE = re.compile(r"^(none|[EPR]{1,3})$")


def parse_grid_arg(values: List[str]) -> Dict[str, List[str]]:
    """Parse repeated `key=v1,v2` arguments into an ordered grid.

    Raises:
        ValueError: On an unknown key, a missing '=', an empty value list or a
            repeated key.
    """
    grid: Dict[str, List[str]] = {}
    for item in values:
        key, sep, raw = item.partition('=')
        key = key.strip()
        if not sep:
            raise ValueError(f"Grid entry must look like key=v1,v2: {item!r}")
        if key not in SWEEP_KEYS:
            raise ValueError(f"Unknown grid key {key!r}. Expected one of {', '.join(SWEEP_KEYS)}.")
        if key in grid:
            raise ValueError(f"Grid key {key!r} given twice")
        options = [v.strip() for v in raw.split(',') if v.strip()]
        if not options:
            raise ValueError(f"Grid key {key!r} has no values")
        grid[key] = options
    return grid


def expand_grid(grid: Dict[str, List[Any]]) -> List[Dict[str, str]]:
    """Cartesian product of a grid, as a list of {key: value} points.

    Raises:
        ValueError: If the grid is empty.
    """
    if not grid:
        raise ValueError("Sweep grid is empty")
    keys = list(grid)
    return [dict(zip(keys, (str(v) for v in values))) for values in product(*(grid[k] for k in keys))]


def point_name(point: Dict[str, str]) -> str:
    """Directory name of a grid point, e.g. 'sigma=0.8_components=EP'."""
    return '_'.join(f"{k}={v}" for k, v in point.items())


def apply_point(base: TrainConfig, point: Dict[str, str]) -> TrainConfig:
    """Return base with the grid point's overrides applied and validated.

    Raises:
        ValueError: On a value that does not parse or fails validation.
    """
    updates: Dict[str, Any] = {}
    uap_updates: Dict[str, Any] = {}

    for key, value in point.items():
        match key:
            case 'sigma' | 'epsilon' | 'alpha':
                uap_updates[key] = float(value)
            case 'beta':
                updates['beta'] = float(value)
            case 'buffer':
                updates['buffer_per_stage'] = int(value)
            case 'seed':
                updates['seed'] = int(value)
            case 'epochs':
                updates['epochs_per_stage'] = int(value)
            case 'components':
                if not _COMPONENTS_RE.match(value):
                    raise ValueError(f"components must be 'none' or letters over E, P, R; got {value!r}")
                updates.update(use_entropy='E' in value,
                               use_distill_pseudo='P' in value,
                               use_distill_real='R' in value)
            case _:
                raise ValueError(f"Unknown grid key {key!r}")

    payload = base.model_dump()
    payload.update(updates)
    payload['uap'] = {**payload['uap'], **uap_updates}
    return TrainConfig.model_validate(payload)
