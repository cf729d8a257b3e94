"""hdp-lab: continual real-vs-forged image detection with historical distribution preserving.

This package trains a small binary detector over a sequence of stages, each of which
brings a new kind of forgery, and keeps the detector from forgetting earlier stages
without storing their images. After every stage a single universal adversarial
perturbation (UAP) is synthesized from the just-trained model; later stages replay
real images plus stored UAPs as pseudo-forgeries and distill features from the
frozen previous model.

Key Features:
    - Synthetic Protocols: Deterministic procedural real images and parametric forgeries,
      assembled into multi-stage protocols (presets p1, p2, p3)
    - Reserve Mechanism: Per-stage UAP synthesis under an L-infinity budget, persisted as a pool
    - Preserve Mechanism: Pseudo-forged replay, pseudo/real feature distillation
    - Baselines: Sequential fine-tuning (SFT), Joint training, optional replay buffer
    - Evaluation: ACC/AUC matrices with AVG and PRE summaries
    - Sweeps: Ablation grids executed as a Hamilton DAG

Configuration:
    On first import, hdp-lab automatically creates ~/.hdp_lab/.env with default
    settings. Edit this file to configure output paths, device and logging levels.

Quick Start:
    >>> from hdp_lab.synthdata import preset_protocol
    >>> from hdp_lab.trainer import TrainConfig
    >>> from hdp_lab.experiment import run_experiment
    >>>
    >>> spec = preset_protocol('p1', global_seed=0)
    >>> report = run_experiment(protocol_spec=spec, cfg=TrainConfig(method='hdp'), out_dir='runs/p1_hdp')
    >>> print(report.avg_acc, report.pre_acc)

Modules:
    synthdata: Procedural images, manipulations and protocol presets
    detector: Feature extractor + linear head detector, checkpoints
    losses: Cross entropy, pseudo entropy, feature distillation, total loss
    uap: Universal adversarial perturbation synthesis and the UAP pool
    trainer: Stage training for HDP, SFT and Joint
    evaluation: ACC/AUC, evaluation matrices, AVG/PRE, feature dumps
    experiment: End-to-end runs with manifests and reports
    cli: Command-line front end
    settings: Configuration management via Pydantic Settings
"""

from pathlib import Path
import shutil
import sys


def _init_config():
    try:
        config_dir = Path.home() / ".hdp_lab"
        env_file = config_dir / ".env"

        if not env_file.exists():
            config_dir.mkdir(parents=True, exist_ok=True)

            package_dir = Path(__file__).parent
            env_example = package_dir / ".env.example"

            if env_example.exists():
                shutil.copy(env_example, env_file)
                print(f"✓ HDP Lab: Created config at {env_file}", file=sys.stderr)

    except Exception as e:
        print(f"Warning: Could not initialize HDP Lab config: {e}", file=sys.stderr)


_init_config()

del _init_config

import logging
from hdp_lab.settings import get_settings

settings = get_settings()

log_level = getattr(logging, settings.log_level.upper(), logging.INFO)

logging.basicConfig(level=log_level,
                    format='%(asctime)s | %(name)s | %(funcName)s | %(levelname)s:%(message)s')
logger = logging.getLogger()
logger.setLevel(log_level)

__version__ = "0.1.0"
