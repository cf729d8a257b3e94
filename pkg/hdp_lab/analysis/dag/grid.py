from typing import Any, Dict, List
from hamilton.htypes import Parallelizable

from hdp_lab import logger
from hdp_lab.analysis.sweep import apply_point, expand_grid
from hdp_lab.trainer import TrainConfig


def grid_points(sweep_grid: Dict[str, List[str]], base_train_config: Dict[str, Any]) -> List[Dict[str, Any]]:
    """Expand the grid and validate every point's configuration before any run starts."""
    base = TrainConfig.model_validate(base_train_config)
    points = []
    for index, point in enumerate(expand_grid(sweep_grid)):
        apply_point(base, point)
        points.append({'index': index, 'values': point})

    logger.info("Sweep over %s grid points: %s", len(points), list(sweep_grid))
    return points


def sweep_point(grid_points: List[Dict[str, Any]]) -> Parallelizable[Dict[str, Any]]:
    """Fan out one task per grid point."""
    for point in grid_points:
        yield point
