"""End-to-end runs: build a protocol, train, evaluate, and write every artifact.

`run_experiment()` is what the `run` command and every sweep point execute. It
writes into one output directory:

    manifest.json                  resolved ProtocolSpec + TrainConfig, seeds, version
    checkpoints/stage_XX.hdpm      model after each stage
    uap_pool/                      HDP only: one HDPU file per stage + manifest.json
    stages/stage_XX.json           StageResult of each stage
    features/stage_XX.csv          optional feature dumps of the final model
    report.json                    MetricsReport; byte-identical across same-seed runs
                                   except timestamp (wall times only with
                                   REPORT_WALL_TIMES=true)

Typical Usage:
    >>> from hdp_lab.experiment import run_experiment
    >>> from hdp_lab.synthdata import preset_protocol
    >>> from hdp_lab.trainer import TrainConfig
    >>>
    >>> report = run_experiment(preset_protocol('p1'), TrainConfig(method='sft'), 'runs/p1_sft')
    >>> report.pre_acc
"""

from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Optional

import torch
from pydantic import BaseModel

import hdp_lab
from hdp_lab import logger
from hdp_lab._utils import SEED_INIT, _config_hash, _derive_seed
from hdp_lab.evaluation import MatrixRecorder, MetricsReport, build_report, feature_dump
from hdp_lab.settings import get_settings
from hdp_lab.storage import json_to_store, store_or_raise
from hdp_lab.synthdata import ProtocolSpec, build_protocol
from hdp_lab.trainer import Method, TrainConfig, run_protocol

REPORT_FILE = 'report.json'
MANIFEST_FILE = 'manifest.json'


class RunManifest(BaseModel):
    """Everything needed to reproduce a run."""
    version: str
    timestamp: str
    protocol: ProtocolSpec
    train_config: TrainConfig
    seeds: Dict[str, int]
    config_hash: str
    outputs: Dict[str, str]


def resolved_config(protocol_spec: ProtocolSpec, cfg: TrainConfig) -> dict:
    return {
        'protocol': protocol_spec.model_dump(mode='json'),
        'train_config': cfg.model_dump(mode='json'),
    }


def default_out_dir(protocol_spec: ProtocolSpec, cfg: TrainConfig) -> Path:
    """Run directory under Settings.runs_local_path."""
    name = f"{protocol_spec.name}_{cfg.method.value}_{cfg.components}_seed{cfg.seed}"
    return Path(get_settings().runs_local_path).expanduser() / name


def _apply_thread_settings() -> None:
    threads = get_settings().torch_num_threads
    if threads:
        torch.set_num_threads(threads)


def run_experiment(protocol_spec: ProtocolSpec,
                   cfg: TrainConfig,
                   out_dir: Optional[str | Path] = None,
                   dump_features: bool = False) -> MetricsReport:
    """Train and evaluate one method on one protocol, writing all artifacts.

    Args:
        protocol_spec: Protocol to build.
        cfg: Training configuration; cfg.method selects HDP, SFT or Joint.
        out_dir: Output directory. Defaults to default_out_dir().
        dump_features: Also write feature CSVs of the final model on every stage's
            test split (with pseudo-forged rows from that stage's UAP for HDP).

    Returns:
        The MetricsReport also written to out_dir/report.json.

    Raises:
        HDPError: Propagated from generation, training or evaluation.
        IOFailure: If an artifact cannot be written.
    """
    _apply_thread_settings()
    out_dir = Path(out_dir).expanduser() if out_dir is not None else default_out_dir(protocol_spec, cfg)
    timestamp = datetime.now(timezone.utc).isoformat(timespec='seconds')

    resolved = resolved_config(protocol_spec, cfg)
    config_hash = _config_hash(resolved)
    seeds = {
        'global_seed': protocol_spec.global_seed,
        'train_seed': cfg.seed,
        'init_seed': _derive_seed(SEED_INIT, cfg.seed),
    }

    manifest = RunManifest(
        version=hdp_lab.__version__,
        timestamp=timestamp,
        protocol=protocol_spec,
        train_config=cfg,
        seeds=seeds,
        config_hash=config_hash,
        outputs={
            'report': str(out_dir / REPORT_FILE),
            'checkpoints': str(out_dir / 'checkpoints'),
            'stages': str(out_dir / 'stages'),
            **({'uap_pool': str(out_dir / 'uap_pool')} if cfg.method == Method.HDP else {}),
        },
    )
    store_or_raise(json_to_store(file_name=MANIFEST_FILE, payload=manifest.model_dump(mode='json'),
                                 base_path=out_dir))

    logger.info("Running %s on protocol %s (seed %s) into %s",
                cfg.method.value, protocol_spec.name, cfg.seed, out_dir)
    stages = build_protocol(protocol_spec)
    recorder = MatrixRecorder(stages)
    model, pool, results = run_protocol(stages, cfg, out_dir, on_stage_end=recorder)
    if cfg.method == Method.JOINT:
        recorder.replicate_last_row()

    if dump_features:
        for t, stage in enumerate(stages):
            feature_dump(model, stage.samples('test'), out_dir / 'features' / f"stage_{stage.stage_id:02d}.csv",
                         pseudo=pool[t] if pool is not None else None, clamp=cfg.uap.clamp_pseudo)

    report = build_report(
        recorder,
        protocol=protocol_spec.name,
        cfg=cfg,
        per_stage_seconds=[r.wall_seconds for r in results] if get_settings().report_wall_times else [],
        sigma_unreached_stages=[r.stage_id for r in results if r.sigma_reached is False],
        config_hash=config_hash,
        seeds=seeds,
        version=hdp_lab.__version__,
        timestamp=timestamp,
    )
    store_or_raise(json_to_store(file_name=REPORT_FILE, payload=report.to_dict(), base_path=out_dir))
    logger.info("Run finished: AVG_acc %.2f, PRE_acc %.2f", report.avg_acc, report.pre_acc)
    return report
