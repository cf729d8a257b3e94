"""Stage-wise training: base cross entropy, HDP replay, SFT and Joint baselines.

A continual run walks the stages of a protocol with one detector:

    - stage 1 is trained with plain binary cross entropy
    - every later stage (HDP) adds, per batch, the pseudo-forged entropy of the current
      real images shifted by one pooled UAP (round-robin over the pool), and feature
      distillation of real and pseudo-forged images against a frozen copy of the
      previous model
    - after each stage one UAP is generated from the new model and appended to the pool

SFT chains plain cross entropy over the stages; Joint trains once on the union of all
training sets. An optional replay buffer keeps `buffer_per_stage` raw samples of
every finished stage and mixes them into later training sets (cross entropy only).

Typical Usage:
    >>> from hdp_lab.synthdata import build_protocol, preset_protocol
    >>> from hdp_lab.trainer import TrainConfig, run_protocol_hdp
    >>>
    >>> stages = build_protocol(preset_protocol('p1', train_size=200, test_size=50))
    >>> model, pool, results = run_protocol_hdp(stages, TrainConfig(epochs_per_stage=3))
    >>> len(pool)
    4

Output Layout (when out_dir is given):
    checkpoints/stage_XX.hdpm, uap_pool/uap_stage_XXX.hdpu + manifest.json,
    stages/stage_XX.json (StageResult).
"""

from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple
import time

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from hdp_lab import logger
from hdp_lab._utils import SEED_BUFFER, SEED_INIT, SEED_TRAIN, _derive_seed
from hdp_lab.detector import Detector, build_detector, clone_frozen, save_checkpoint
from hdp_lab.errors import EmptyPool, EmptyStage, KTooLarge, ShapeMismatch
from hdp_lab.losses import LossBreakdown, bce, feat_mse, pseudo_entropy, total_loss
from hdp_lab.settings import get_settings
from hdp_lab.storage import json_to_store, store_or_raise
from hdp_lab.synthdata import Sample, StageDataset, stack_samples
from hdp_lab.uap import (UAPConfig, UAPPool, generate_uap, make_pseudo, pool_append, pool_save, save_uap,
                         uap_file_name)

StageHook = Callable[[Detector, StageDataset, 'StageResult'], None]
BatchHook = Callable[[int, int, LossBreakdown], None]


class Method(str, Enum):
    HDP = "hdp"
    SFT = "sft"
    JOINT = "joint"


class TrainConfig(BaseModel):
    """Optimization and replay hyperparameters of one run.

    Attributes:
        lr: Adam learning rate.
        weight_decay: Adam weight decay.
        batch_size: Training mini-batch size.
        epochs_per_stage: Epochs per stage (Joint trains this many epochs on the union).
        beta: Weight of the two distillation terms.
        seed: Run seed; every other seed derives from it.
        uap: UAP generation settings.
        buffer_per_stage: Raw samples kept per finished stage (0 disables the buffer).
        method: hdp, sft or joint.
        use_entropy: Include the pseudo-forged entropy term.
        use_distill_pseudo: Include pseudo-forged feature distillation.
        use_distill_real: Include real feature distillation.
        distill_mode: 'sq_l2' (batch mean of squared L2) or 'mse' (per element).
        arch: Detector architecture.
    """
    model_config = ConfigDict(frozen=True)

    lr: float = Field(default=1e-3, gt=0.0)
    weight_decay: float = Field(default=1e-5, ge=0.0)
    batch_size: int = Field(default=64, ge=1)
    epochs_per_stage: int = Field(default=10, ge=1)
    beta: float = Field(default=1.0, ge=0.0)
    seed: int = Field(default=0, ge=0)
    uap: UAPConfig = UAPConfig()
    buffer_per_stage: int = Field(default=0, ge=0)
    method: Method = Method.HDP
    use_entropy: bool = True
    use_distill_pseudo: bool = True
    use_distill_real: bool = True
    distill_mode: Literal['sq_l2', 'mse'] = 'sq_l2'
    arch: str = 'conv3'

    @property
    def components(self) -> str:
        """Enabled HDP terms as letters E, P, R, or 'none'."""
        letters = ''.join(flag for flag, on in (('E', self.use_entropy),
                                                ('P', self.use_distill_pseudo),
                                                ('R', self.use_distill_real)) if on)
        return letters or 'none'


@dataclass
class ReplayBuffer:
    """Raw samples kept from finished stages, at most `capacity` per stage."""
    capacity: int = 0
    entries: Dict[int, List[Sample]] = field(default_factory=dict)

    def add(self, stage_id: int, samples: Sequence[Sample]) -> None:
        if len(samples) > self.capacity:
            raise KTooLarge(f"Buffer holds {self.capacity} samples per stage, got {len(samples)}")
        self.entries[stage_id] = list(samples)

    def samples(self) -> List[Sample]:
        return [s for stage_id in sorted(self.entries) for s in self.entries[stage_id]]

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())


@dataclass
class StageResult:
    """Outcome of training one stage.

    Attributes:
        stage_id: Stage trained.
        losses: Mean loss components over the final epoch.
        first_epoch_losses: Mean loss components over the first epoch.
        wall_seconds: Training plus UAP generation time.
        batches: Optimizer steps taken.
        checkpoint_path: Written checkpoint, if any.
        uap_path: Written UAP file (HDP only).
        attack_rate: Achieved attack rate of the stage UAP (HDP only).
        sigma_reached: Whether the UAP reached sigma (HDP only).
    """
    stage_id: int
    losses: Dict[str, float]
    first_epoch_losses: Dict[str, float]
    wall_seconds: float
    batches: int
    checkpoint_path: Optional[str] = None
    uap_path: Optional[str] = None
    attack_rate: Optional[float] = None
    sigma_reached: Optional[bool] = None

    def to_dict(self) -> dict:
        return asdict(self)


class _LossRecorder:
    """Per-batch hook collecting loss breakdowns by epoch."""

    def __init__(self, forward: Optional[BatchHook] = None):
        self.by_epoch: Dict[int, List[LossBreakdown]] = {}
        self.batches = 0
        self._forward = forward

    def __call__(self, batch_index: int, epoch: int, breakdown: LossBreakdown) -> None:
        self.by_epoch.setdefault(epoch, []).append(breakdown)
        self.batches += 1
        if self._forward:
            self._forward(batch_index, epoch, breakdown)

    def epoch_means(self, epoch: int) -> Dict[str, float]:
        records = [b.to_dict() for b in self.by_epoch.get(epoch, [])]
        if not records:
            return {}
        return {k: float(np.mean([r[k] for r in records])) for k in records[0]}

    def first(self) -> Dict[str, float]:
        return self.epoch_means(min(self.by_epoch)) if self.by_epoch else {}

    def last(self) -> Dict[str, float]:
        return self.epoch_means(max(self.by_epoch)) if self.by_epoch else {}


def _training_arrays(stage: StageDataset,
                     extra: Sequence[Sample] = ()) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Images, labels and origin stage ids of a stage's training set plus extra samples."""
    samples = stage.samples('train') + list(extra)
    if not stage.samples('train'):
        raise EmptyStage(f"Stage {stage.stage_id} has no training samples")
    x, y = stack_samples(samples)
    origin = np.array([s.stage_id for s in samples], dtype=np.int64)
    return x, y, origin


def _fit(m: Detector,
         x: np.ndarray,
         y: np.ndarray,
         origin: np.ndarray,
         cfg: TrainConfig,
         seed_stage: int,
         batch_loss: Callable[[torch.Tensor, torch.Tensor, torch.Tensor, int], LossBreakdown],
         on_batch: Optional[BatchHook] = None) -> Detector:
    """Adam over seeded shuffles of (x, y); batch_loss builds each batch's objective."""
    if len(x) == 0:
        raise EmptyStage("No training samples")

    device = next(m.parameters()).device
    xt = torch.from_numpy(x).to(device)
    yt = torch.from_numpy(y).to(device)
    ot = torch.from_numpy(origin).to(device)

    m.train()
    optimizer = torch.optim.Adam(m.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    generator = torch.Generator().manual_seed(_derive_seed(SEED_TRAIN, cfg.seed, seed_stage))

    batch_index = 0
    epochs = tqdm(range(cfg.epochs_per_stage), desc=f"stage {seed_stage}",
                  disable=not get_settings().progress_bar)
    for epoch in epochs:
        perm = torch.randperm(len(xt), generator=generator).to(device)
        totals = []
        for start in range(0, len(xt), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            optimizer.zero_grad()
            breakdown = batch_loss(xt[idx], yt[idx], ot[idx], batch_index)
            breakdown.total.backward()
            optimizer.step()

            record = breakdown.item()
            totals.append(record.total)
            if on_batch:
                on_batch(batch_index, epoch, record)
            batch_index += 1

        logger.info("Stage %s epoch %s/%s: mean loss %.6f",
                    seed_stage, epoch + 1, cfg.epochs_per_stage, float(np.mean(totals)))

    m.eval()
    return m


def base_batch_loss(m: Detector, xb: torch.Tensor, yb: torch.Tensor, beta: float = 0.0) -> LossBreakdown:
    """Cross entropy of one batch, as a LossBreakdown with zero HDP terms."""
    ce = bce(torch.sigmoid(m(xb)), yb)
    return total_loss(ce, 0.0, 0.0, 0.0, beta)


def hdp_batch_loss(m: Detector,
                   teacher: Optional[Detector],
                   xb: torch.Tensor,
                   yb: torch.Tensor,
                   pool: UAPPool,
                   batch_index: int,
                   cfg: TrainConfig,
                   current: Optional[torch.Tensor] = None,
                   intermediates: Optional[dict] = None) -> LossBreakdown:
    """Objective of one HDP batch: ce + E + beta * (L_r + L_p).

    The pseudo-forged batch is the batch's real images of the current stage plus
    pool entry n = batch_index mod len(pool). Buffered samples (current == False)
    only enter the cross entropy.

    Args:
        m: Student detector being trained.
        teacher: Frozen previous detector.
        xb: Images (N, C, H, W).
        yb: Labels (N,).
        pool: UAP pool of the finished stages.
        batch_index: Running batch counter within the stage.
        cfg: Training configuration (beta, component switches, distillation mode).
        current: Boolean mask of samples from the stage being trained. Defaults to all.
        intermediates: If a dict is given, it is filled with detached arrays of the
            probabilities, features and pool index used.

    Returns:
        LossBreakdown with tensor components.

    Raises:
        EmptyPool: If pseudo-forged terms are enabled and the pool is empty.
    """
    need_pseudo = cfg.use_entropy or cfg.use_distill_pseudo
    if need_pseudo and len(pool) == 0:
        raise EmptyPool("HDP replay needs at least one pooled perturbation")
    if (need_pseudo or cfg.use_distill_real) and teacher is None:
        raise ValueError("Feature distillation needs a teacher detector")

    feats = m.features(xb)
    probs = torch.sigmoid(m.head(feats).squeeze(-1))
    ce = bce(probs, yb)

    real_mask = yb == 0
    if current is not None:
        real_mask = real_mask & current
    reals = xb[real_mask]

    E, l_p, l_r = 0.0, 0.0, 0.0
    record = {'probs': probs, 'labels': yb}
    if len(reals) > 0:
        if need_pseudo:
            n = batch_index % len(pool)
            pseudo = make_pseudo(reals, pool[n], cfg.uap.clamp_pseudo)
            pseudo_feats = m.features(pseudo)
            record.update(pool_index=n, pseudo=pseudo, pseudo_feats=pseudo_feats)
            if cfg.use_entropy:
                pseudo_probs = torch.sigmoid(m.head(pseudo_feats).squeeze(-1))
                E = pseudo_entropy(pseudo_probs)
                record['pseudo_probs'] = pseudo_probs
            if cfg.use_distill_pseudo:
                with torch.no_grad():
                    teacher_pseudo = teacher.features(pseudo)
                l_p = feat_mse(pseudo_feats, teacher_pseudo, cfg.distill_mode)
                record['teacher_pseudo_feats'] = teacher_pseudo
        if cfg.use_distill_real:
            with torch.no_grad():
                teacher_real = teacher.features(reals)
            l_r = feat_mse(feats[real_mask], teacher_real, cfg.distill_mode)
            record.update(real_feats=feats[real_mask], teacher_real_feats=teacher_real)

    if intermediates is not None:
        intermediates.update({k: v.detach().cpu().numpy() if isinstance(v, torch.Tensor) else v
                              for k, v in record.items()})
    return total_loss(ce, E, l_r, l_p, cfg.beta)


def train_stage_base(m: Detector,
                     stage: StageDataset,
                     cfg: TrainConfig,
                     extra: Sequence[Sample] = (),
                     on_batch: Optional[BatchHook] = None) -> Detector:
    """Train on one stage with binary cross entropy only.

    Args:
        m: Detector, trained in place.
        stage: Stage whose training split is used.
        cfg: Training configuration.
        extra: Buffered samples of earlier stages mixed into the training set.
        on_batch: Called with (batch_index, epoch, LossBreakdown) after each step.

    Returns:
        The trained detector (same instance).

    Raises:
        EmptyStage: If the stage has no training samples.
    """
    x, y, origin = _training_arrays(stage, extra)
    return _fit(m, x, y, origin, cfg, stage.stage_id,
                lambda xb, yb, ob, i: base_batch_loss(m, xb, yb, cfg.beta), on_batch)


def train_stage_hdp(m: Detector,
                    teacher: Detector,
                    stage: StageDataset,
                    pool: UAPPool,
                    cfg: TrainConfig,
                    extra: Sequence[Sample] = (),
                    on_batch: Optional[BatchHook] = None) -> Detector:
    """Train on one stage with HDP replay against the frozen teacher.

    Raises:
        EmptyStage: If the stage has no training samples.
        EmptyPool: If the pool is empty while pseudo-forged terms are enabled.
    """
    if (cfg.use_entropy or cfg.use_distill_pseudo) and len(pool) == 0:
        raise EmptyPool(f"Stage {stage.stage_id} HDP training needs a non-empty UAP pool")
    x, y, origin = _training_arrays(stage, extra)
    return _fit(m, x, y, origin, cfg, stage.stage_id,
                lambda xb, yb, ob, i: hdp_batch_loss(m, teacher, xb, yb, pool, i, cfg,
                                                     current=ob == stage.stage_id),
                on_batch)


def select_buffer(stage: StageDataset, k: int, seed: int) -> List[Sample]:
    """Pick ceil(k/2) real and floor(k/2) fake training samples, seeded, without replacement.

    Raises:
        KTooLarge: If the stage cannot supply that many samples of a class.
    """
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    n_real, n_fake = (k + 1) // 2, k // 2
    if n_real > len(stage.train_real) or n_fake > len(stage.train_fake):
        raise KTooLarge(f"Cannot select {k} samples from stage {stage.stage_id} "
                        f"({len(stage.train_real)} real, {len(stage.train_fake)} fake)")

    rng = np.random.default_rng(_derive_seed(SEED_BUFFER, seed, stage.stage_id))
    real_idx = np.sort(rng.choice(len(stage.train_real), size=n_real, replace=False))
    fake_idx = np.sort(rng.choice(len(stage.train_fake), size=n_fake, replace=False))
    return [stage.train_real[i] for i in real_idx] + [stage.train_fake[i] for i in fake_idx]


def joint_training_set(protocol: Sequence[StageDataset]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Union of every stage's training split."""
    samples = [s for stage in protocol for s in stage.samples('train')]
    x, y = stack_samples(samples)
    return x, y, np.array([s.stage_id for s in samples], dtype=np.int64)


def _check_protocol(protocol: Sequence[StageDataset]) -> Tuple[int, int, int]:
    if len(protocol) < 2:
        raise ValueError(f"A protocol needs at least 2 stages, got {len(protocol)}")
    shapes = {stage.image_shape for stage in protocol}
    if len(shapes) != 1:
        raise ShapeMismatch(f"Stages disagree on image shape: {sorted(shapes)}")
    return shapes.pop()


def _new_detector(protocol: Sequence[StageDataset], cfg: TrainConfig) -> Detector:
    shape = _check_protocol(protocol)
    m = build_detector(cfg.arch, shape, seed=_derive_seed(SEED_INIT, cfg.seed))
    return m.to(get_settings().device)


def _finish_stage(m: Detector,
                  stage: StageDataset,
                  recorder: _LossRecorder,
                  started: float,
                  out_dir: Optional[Path],
                  uap=None) -> StageResult:
    m.stage = stage.stage_id
    result = StageResult(stage_id=stage.stage_id,
                         losses=recorder.last(),
                         first_epoch_losses=recorder.first(),
                         wall_seconds=time.perf_counter() - started,
                         batches=recorder.batches)
    if uap is not None:
        result.attack_rate = uap.achieved_attack_rate
        result.sigma_reached = uap.sigma_reached

    if out_dir is not None:
        ckpt = save_checkpoint(m, out_dir / 'checkpoints' / f"stage_{stage.stage_id:02d}.hdpm")
        result.checkpoint_path = str(ckpt.path)
        if uap is not None:
            result.uap_path = str(save_uap(uap, out_dir / 'uap_pool' / uap_file_name(stage.stage_id)))
        store_or_raise(json_to_store(file_name=f"stage_{stage.stage_id:02d}.json", payload=result.to_dict(),
                                     base_path=out_dir, folder='stages'))

    logger.info("Stage %s done in %.2fs: %s", stage.stage_id, result.wall_seconds, result.losses)
    return result


def run_protocol_hdp(protocol: Sequence[StageDataset],
                     cfg: TrainConfig,
                     out_dir: Optional[str | Path] = None,
                     on_stage_end: Optional[StageHook] = None,
                     on_batch: Optional[BatchHook] = None) -> Tuple[Detector, UAPPool, List[StageResult]]:
    """Run historical distribution preserving training over a protocol.

    Stage 1 uses cross entropy only; stages >= 2 use hdp_batch_loss() with a frozen
    copy of the previous model as teacher. After every stage, including the last,
    one UAP is generated and appended to the pool.

    Args:
        protocol: Stage datasets in order (>= 2).
        cfg: Training configuration.
        out_dir: If given, checkpoints, UAP files, the pool manifest and stage
            results are written under it.
        on_stage_end: Called with (model, stage, StageResult) after each stage,
            e.g. a MatrixRecorder.
        on_batch: Called with (batch_index, epoch, LossBreakdown) after each step.

    Returns:
        (final detector, UAP pool of length T, one StageResult per stage).
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    m = _new_detector(protocol, cfg)
    pool = UAPPool()
    buffer = ReplayBuffer(cfg.buffer_per_stage)
    results = []

    for t, stage in enumerate(protocol):
        started = time.perf_counter()
        recorder = _LossRecorder(on_batch)
        logger.info("HDP stage %s (%s of %s), pool size %s", stage.stage_id, t + 1, len(protocol), len(pool))

        if t == 0:
            train_stage_base(m, stage, cfg, buffer.samples(), recorder)
        else:
            teacher = clone_frozen(m)
            train_stage_hdp(m, teacher, stage, pool, cfg, buffer.samples(), recorder)

        p = generate_uap(m, stage.train_real, cfg.uap, stage.stage_id, seed=cfg.seed)
        pool_append(pool, p)
        if cfg.buffer_per_stage:
            buffer.add(stage.stage_id, select_buffer(stage, cfg.buffer_per_stage, cfg.seed))

        result = _finish_stage(m, stage, recorder, started, out_dir, uap=p)
        results.append(result)
        if on_stage_end:
            on_stage_end(m, stage, result)

    if out_dir is not None:
        pool_save(pool, out_dir / 'uap_pool')
    return m, pool, results


def run_protocol_sft(protocol: Sequence[StageDataset],
                     cfg: TrainConfig,
                     out_dir: Optional[str | Path] = None,
                     on_stage_end: Optional[StageHook] = None,
                     on_batch: Optional[BatchHook] = None) -> Tuple[Detector, List[StageResult]]:
    """Sequentially fine-tune one detector on each stage with cross entropy only."""
    out_dir = Path(out_dir) if out_dir is not None else None
    m = _new_detector(protocol, cfg)
    buffer = ReplayBuffer(cfg.buffer_per_stage)
    results = []

    for stage in protocol:
        started = time.perf_counter()
        recorder = _LossRecorder(on_batch)
        train_stage_base(m, stage, cfg, buffer.samples(), recorder)
        if cfg.buffer_per_stage:
            buffer.add(stage.stage_id, select_buffer(stage, cfg.buffer_per_stage, cfg.seed))

        result = _finish_stage(m, stage, recorder, started, out_dir)
        results.append(result)
        if on_stage_end:
            on_stage_end(m, stage, result)
    return m, results


def run_protocol_joint(protocol: Sequence[StageDataset],
                       cfg: TrainConfig,
                       out_dir: Optional[str | Path] = None,
                       on_stage_end: Optional[StageHook] = None,
                       on_batch: Optional[BatchHook] = None) -> Tuple[Detector, List[StageResult]]:
    """Train one detector on the union of all stages' training sets.

    The single result is reported under the last stage id; on_stage_end is called
    once, with the last stage.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    m = _new_detector(protocol, cfg)
    last = protocol[-1]

    started = time.perf_counter()
    recorder = _LossRecorder(on_batch)
    x, y, origin = joint_training_set(protocol)
    _fit(m, x, y, origin, cfg, 0, lambda xb, yb, ob, i: base_batch_loss(m, xb, yb, cfg.beta), recorder)

    result = _finish_stage(m, last, recorder, started, out_dir)
    if on_stage_end:
        on_stage_end(m, last, result)
    return m, [result]


def run_protocol(protocol: Sequence[StageDataset],
                 cfg: TrainConfig,
                 out_dir: Optional[str | Path] = None,
                 on_stage_end: Optional[StageHook] = None) -> Tuple[Detector, Optional[UAPPool], List[StageResult]]:
    """Dispatch on cfg.method; the pool is None for SFT and Joint."""
    match cfg.method:
        case Method.HDP:
            return run_protocol_hdp(protocol, cfg, out_dir, on_stage_end)
        case Method.SFT:
            m, results = run_protocol_sft(protocol, cfg, out_dir, on_stage_end)
        case Method.JOINT:
            m, results = run_protocol_joint(protocol, cfg, out_dir, on_stage_end)
        case _:
            raise ValueError(f"Unknown method: {cfg.method}")
    return m, None, results
