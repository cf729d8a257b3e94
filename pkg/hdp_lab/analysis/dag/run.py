from pathlib import Path
from typing import Any, Dict

from hdp_lab import logger
from hdp_lab.analysis.sweep import apply_point, point_name
from hdp_lab.trainer import TrainConfig


def point_train_config(sweep_point: Dict[str, Any], base_train_config: Dict[str, Any]) -> Dict[str, Any]:
    """Base configuration with the point's overrides, as a JSON-safe dict."""
    cfg = apply_point(TrainConfig.model_validate(base_train_config), sweep_point['values'])
    return cfg.model_dump(mode='json')


def point_out_dir(sweep_point: Dict[str, Any], sweep_out_dir: str) -> str:
    """Disjoint output directory of one grid point."""
    return str(Path(sweep_out_dir).expanduser() / point_name(sweep_point['values']))


def point_report(sweep_point: Dict[str, Any],
                 point_train_config: Dict[str, Any],
                 point_out_dir: str,
                 protocol_spec: Dict[str, Any]) -> Dict[str, Any]:
    """Run one grid point and return its summary row."""
    from hdp_lab.experiment import REPORT_FILE, run_experiment
    from hdp_lab.synthdata import ProtocolSpec

    cfg = TrainConfig.model_validate(point_train_config)
    logger.info("Sweep point %s: %s", sweep_point['index'], sweep_point['values'])
    report = run_experiment(ProtocolSpec.model_validate(protocol_spec), cfg, point_out_dir)

    return {
        'point': sweep_point['index'],
        'name': point_name(sweep_point['values']),
        **sweep_point['values'],
        'protocol': report.protocol,
        'method': report.method,
        'seed': report.seed,
        'avg_acc': report.avg_acc,
        'avg_auc': report.avg_auc,
        'pre_acc': report.pre_acc,
        'pre_auc': report.pre_auc,
        'pre_final_acc': report.pre_final_acc,
        'pre_final_auc': report.pre_final_auc,
        'sigma_unreached_stages': len(report.sigma_unreached_stages),
        'report': str(Path(point_out_dir) / REPORT_FILE),
    }
