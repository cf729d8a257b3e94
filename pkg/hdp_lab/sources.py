"""Readers for run artifacts written by earlier runs and sweeps.

This module collects MetricsReport files from an output tree into a pandas
DataFrame for the `report` command and for notebooks.

Data Sources:
    - reports_from_store(): Every report.json below a directory, one row per run
    - report_from_file(): A single report.json as a MetricsReport

Typical Usage:
    >>> from hdp_lab.sources import reports_from_store
    >>>
    >>> reports = reports_from_store('~/.hdp_lab/runs')
    >>> reports[['method', 'avg_acc', 'pre_acc']]

Important Notes:
    - Rows are ordered by the report's relative path, so output is stable
    - Reports whose stored summaries disagree with their matrices are kept and logged
      as warnings; unreadable files are skipped with an error log
"""

from hdp_lab import logger
from hdp_lab.evaluation import MetricsReport
from pathlib import Path
from typing import List
import json
import pandas as pd

SUMMARY_COLUMNS: List[str] = ['avg_acc', 'avg_auc', 'pre_acc', 'pre_auc', 'pre_final_acc', 'pre_final_auc']


def report_from_file(path: str | Path) -> MetricsReport:
    """Load one report.json.

    Raises:
        ValueError: If the file is not a valid report.
    """
    try:
        payload = json.loads(Path(path).expanduser().read_text(encoding='utf-8'))
        return MetricsReport.from_dict(payload)
    except (OSError, json.JSONDecodeError, TypeError) as e:
        raise ValueError(f"{path} is not a readable report: {e}") from e


def reports_from_store(in_dir: str | Path,
                       file_name: str = 'report.json') -> pd.DataFrame:
    """Collect every report below a directory into a DataFrame.

    Args:
        in_dir: Directory searched recursively.
        file_name: Report file name. Defaults to 'report.json'.

    Returns:
        DataFrame with columns run, protocol, method, components, sigma, beta,
        buffer_per_stage, seed, epochs, the summary metrics and matrix_acc. Empty if
        no report is found.
    """
    root = Path(in_dir).expanduser()
    rows = []

    for path in sorted(root.rglob(file_name)):
        try:
            report = report_from_file(path)
        except ValueError as e:
            logger.error('Skipping %s: %s', path, e)
            continue

        report.is_consistent()
        run = str(path.parent.relative_to(root)) if path.parent != root else '.'
        rows.append({
            'run': run,
            'protocol': report.protocol,
            'method': report.method,
            'components': report.components,
            'sigma': report.sigma,
            'beta': report.beta,
            'buffer_per_stage': report.buffer_per_stage,
            'seed': report.seed,
            'epochs': report.epochs,
            **{col: getattr(report, col) for col in SUMMARY_COLUMNS},
            'matrix_acc': report.matrix_acc,
        })

    logger.info('Found %s reports under %s', len(rows), root)
    columns = ['run', 'protocol', 'method', 'components', 'sigma', 'beta', 'buffer_per_stage', 'seed', 'epochs',
               *SUMMARY_COLUMNS, 'matrix_acc']
    return pd.DataFrame(rows, columns=columns)


__all__ = [
    'report_from_file',
    'reports_from_store',
    'SUMMARY_COLUMNS',
]
