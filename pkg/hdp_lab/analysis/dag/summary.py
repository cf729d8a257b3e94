import io
import pandas as pd
from typing import Any, Dict
from hamilton.htypes import Collect
from hamilton.function_modifiers import config

from hdp_lab import logger


def sweep_summary(point_report: Collect[Dict[str, Any]]) -> pd.DataFrame:
    """Collect per-point rows into one DataFrame ordered by grid position."""
    return pd.DataFrame(list(point_report)).sort_values('point').reset_index(drop=True)


@config.when(summary_csv="enabled")
def sweep_summary_csv__enabled(sweep_summary: pd.DataFrame, sweep_out_dir: str) -> Dict[str, Any]:
    """Write summary.csv next to the point directories."""
    from hdp_lab.storage import to_store

    buffer = io.StringIO()
    sweep_summary.to_csv(buffer, index=False)
    response = to_store(file_name='summary.csv', content=buffer.getvalue().encode('utf-8'), base_path=sweep_out_dir)

    if response['statusCode'] == 0:
        logger.info("Sweep summary with %s rows saved to %s", len(sweep_summary), response['file_path'])
    else:
        logger.warning("Failed to save sweep summary.")
    return response


@config.when(summary_csv="disabled")
def sweep_summary_csv__disabled(sweep_summary: pd.DataFrame) -> Dict[str, Any]:
    return {}
