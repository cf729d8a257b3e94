"""Universal adversarial perturbations and the per-stage UAP pool.

After every stage the just-trained detector is attacked with one universal
perturbation p: a single C x H x W array, bounded by epsilon in L-infinity norm, that
pushes real images towards the "fake" decision. Adding p to real images of a later
stage yields pseudo-forged samples that stand in for the historical forgery
distribution, so no historical image has to be stored.

Generation is a projected sign-gradient ascent on mean log P(fake | x + p) over
seeded mini-batches of the stage's real training images. The attack success rate
(fraction of reals predicted fake) is evaluated after each full sweep; generation
stops at the first sweep reaching sigma, or after max_iters steps with the best
perturbation seen and `sigma_reached=False`.

Functions:
    - make_pseudo(): x + delta, the pseudo-forged images
    - attack_rate(): Fraction of perturbed reals predicted fake
    - uap_step(): One projected sign-gradient step
    - generate_uap(): Full generation loop for one stage
    - save_uap() / load_uap(): Single HDPU file
    - pool_append() / pool_save() / pool_load(): Ordered pool plus manifest.json

UAP File Format:
    Header '<4sIIIIffII' = magic "HDPU", version, C, H, W, epsilon (f32),
    achieved attack rate (f32), stage_id, iterations_used; then C*H*W little-endian
    float32 deltas in C-order.

Important Notes:
    - The default step ascends log P(fake), which lowers the fake-label cross entropy.
      `paper_sign=True` flips the step to the literal descent form for comparison.
    - x + p is not clamped to [0, 1] unless `clamp_pseudo=True`; generation and
      replay use the same rule.
"""

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional
import json
import struct

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, field_validator

from hdp_lab import logger
from hdp_lab._utils import SEED_UAP, _derive_seed
from hdp_lab.detector import Detector, _as_batch, clone_frozen, predict
from hdp_lab.errors import (CorruptFile, DuplicateStage, EmptyBatch, EmptySubset, NonFiniteGradient,
                            PoolOrderError, ShapeMismatch, VersionMismatch)
from hdp_lab.storage import json_to_store, store_or_raise, to_store

UAP_MAGIC = b"HDPU"
UAP_VERSION = 1
_UAP_HEADER = struct.Struct("<4sIIIIffII")

POOL_MANIFEST = 'manifest.json'

_EVAL_BATCH = 256


class UAPConfig(BaseModel):
    """Hyperparameters of UAP generation.

    Attributes:
        epsilon: L-infinity budget of the perturbation.
        alpha: Sign-gradient step size.
        sigma: Attack success rate that ends generation, in (0, 1].
        max_iters: Maximum number of steps.
        gen_subset_size: Maximum number of real images used for generation.
        batch_size: Mini-batch size of one step.
        paper_sign: Step in the literal descent direction instead of ascending log P(fake).
        clamp_pseudo: Clamp x + p to [0, 1] during generation and replay.
    """
    model_config = ConfigDict(frozen=True)

    epsilon: float = Field(default=0.15, gt=0.0)
    alpha: float = Field(default=1e-4, gt=0.0)
    sigma: float = 0.8
    max_iters: int = Field(default=5000, ge=1)
    gen_subset_size: int = Field(default=1000, ge=1)
    batch_size: int = Field(default=64, ge=1)
    paper_sign: bool = False
    clamp_pseudo: bool = False

    @field_validator('sigma')
    @classmethod
    def _check_sigma(cls, v: float) -> float:
        if not 0.0 < v <= 1.0:
            raise ValueError("sigma must be in (0,1]")
        return v


@dataclass
class Perturbation:
    """A universal perturbation generated after one stage.

    Attributes:
        delta: Float32 array (C, H, W) with max-abs <= epsilon.
        epsilon: L-infinity budget.
        stage_id: Stage whose model produced the perturbation.
        achieved_attack_rate: Attack success rate on the generation subset.
        iterations_used: Number of sign-gradient steps taken.
        sigma_reached: False when generation ended on max_iters below sigma.
    """
    delta: np.ndarray
    epsilon: float
    stage_id: int
    achieved_attack_rate: float = 0.0
    iterations_used: int = 0
    sigma_reached: bool = True

    @classmethod
    def zeros(cls, shape, epsilon: float, stage_id: int) -> 'Perturbation':
        return cls(delta=np.zeros(shape, dtype=np.float32), epsilon=epsilon, stage_id=stage_id)


@dataclass
class UAPPool:
    """Ordered perturbations, one per completed stage."""
    perturbations: List[Perturbation] = field(default_factory=list)
    path: Optional[Path] = None

    def __len__(self) -> int:
        return len(self.perturbations)

    def __getitem__(self, n: int) -> Perturbation:
        return self.perturbations[n]

    @property
    def stage_ids(self) -> List[int]:
        return [p.stage_id for p in self.perturbations]


def _budget(epsilon: float) -> float:
    """Largest float32 value not above epsilon."""
    bound = np.float32(epsilon)
    if float(bound) > epsilon:
        bound = np.nextafter(bound, np.float32(0))
    return float(bound)


def make_pseudo(reals, p: Perturbation | np.ndarray, clamp: bool = False):
    """Pseudo-forged images x + delta.

    Args:
        reals: Image (C, H, W) or batch (N, C, H, W), numpy array or torch tensor.
        p: Perturbation or raw delta array.
        clamp: Clamp the result to [0, 1].

    Returns:
        New array or tensor of the same kind as `reals`; the input is not modified.

    Raises:
        ShapeMismatch: If the trailing (C, H, W) of reals differs from the delta shape.
    """
    delta = p.delta if isinstance(p, Perturbation) else p
    if tuple(reals.shape[-3:]) != tuple(np.shape(delta)):
        raise ShapeMismatch(f"Images of shape {tuple(reals.shape)} do not match perturbation "
                            f"of shape {tuple(np.shape(delta))}")
    if isinstance(reals, torch.Tensor):
        out = reals + torch.as_tensor(delta, dtype=reals.dtype, device=reals.device)
        return out.clamp(0.0, 1.0) if clamp else out
    out = np.asarray(reals) + np.asarray(delta, dtype=np.float32)
    return np.clip(out, 0.0, 1.0) if clamp else out


def _stack(reals) -> np.ndarray:
    if isinstance(reals, torch.Tensor):
        return reals.detach().cpu().numpy().astype(np.float32)
    if isinstance(reals, np.ndarray):
        return reals.astype(np.float32, copy=False)
    if len(reals) == 0:
        return np.zeros((0,), dtype=np.float32)
    return np.stack([np.asarray(getattr(r, 'image', r), dtype=np.float32) for r in reals])


def attack_rate(m: Detector, reals, p: Perturbation | np.ndarray, clamp: bool = False) -> float:
    """Fraction of real images predicted fake after adding the perturbation.

    Raises:
        EmptyBatch: If reals is empty.
    """
    x = _stack(reals)
    if len(x) == 0:
        raise EmptyBatch("attack_rate needs at least one real image")
    flipped = 0
    for start in range(0, len(x), _EVAL_BATCH):
        flipped += int(predict(m, make_pseudo(x[start:start + _EVAL_BATCH], p, clamp)).sum())
    return flipped / len(x)


def uap_step(p: np.ndarray,
             batch,
             m: Detector,
             alpha: float,
             epsilon: float,
             paper_sign: bool = False,
             clamp: bool = False) -> np.ndarray:
    """One projected sign-gradient step on the perturbation.

    p <- clip(p + alpha * sgn(grad_p mean log f(x + p)), -epsilon, epsilon)

    Args:
        p: Current delta (C, H, W) with max-abs <= epsilon.
        batch: Real images (N, C, H, W).
        m: Detector, not modified.
        alpha: Step size (0 leaves p unchanged).
        epsilon: L-infinity budget.
        paper_sign: Subtract the step instead of adding it.
        clamp: Clamp x + p to [0, 1] before the forward pass.

    Returns:
        Updated float32 delta.

    Raises:
        ShapeMismatch: If shapes disagree.
        NonFiniteGradient: If the gradient has NaN or infinite entries.
    """
    x = _as_batch(m, batch)
    if tuple(np.shape(p)) != m.input_shape:
        raise ShapeMismatch(f"Perturbation shape {np.shape(p)} differs from input shape {m.input_shape}")

    delta = torch.tensor(np.asarray(p), dtype=x.dtype, device=x.device, requires_grad=True)
    pseudo = x + delta
    if clamp:
        pseudo = pseudo.clamp(0.0, 1.0)
    objective = F.logsigmoid(m(pseudo)).mean()
    grad, = torch.autograd.grad(objective, delta)
    if not torch.isfinite(grad).all():
        raise NonFiniteGradient("Perturbation gradient contains NaN or infinite values")

    direction = -1.0 if paper_sign else 1.0
    bound = _budget(epsilon)
    updated = (delta.detach() + direction * alpha * grad.sign()).clamp(-bound, bound)
    return updated.cpu().numpy().astype(np.float32)


def generate_uap(m: Detector,
                 reals,
                 cfg: UAPConfig,
                 stage_id: int,
                 seed: int = 0) -> Perturbation:
    """Generate the universal perturbation of one stage.

    Starting from p = 0, the attack rate is checked once, then seeded sweeps of
    mini-batches apply uap_step() until the rate measured after a sweep reaches
    cfg.sigma or cfg.max_iters steps are used.

    Args:
        m: Just-trained detector. A frozen clone is attacked; m is not modified.
        reals: Real training images of the stage (array, tensor or list of Sample).
        cfg: Generation hyperparameters.
        stage_id: Stage that produced m.
        seed: Run seed; mixed with stage_id for subsampling and batch order.

    Returns:
        The first perturbation reaching sigma, or the best one seen with
        sigma_reached=False.

    Raises:
        EmptySubset: If no real images are given.
    """
    x = _stack(reals)
    if len(x) == 0:
        raise EmptySubset(f"No real images to generate the stage {stage_id} perturbation from")

    rng = np.random.default_rng(_derive_seed(SEED_UAP, seed, stage_id))
    if len(x) > cfg.gen_subset_size:
        x = x[np.sort(rng.choice(len(x), size=cfg.gen_subset_size, replace=False))]

    frozen = clone_frozen(m)
    delta = np.zeros(frozen.input_shape, dtype=np.float32)
    rate = attack_rate(frozen, x, delta, cfg.clamp_pseudo)
    best_rate, best_delta = rate, delta
    iterations = 0

    while rate < cfg.sigma and iterations < cfg.max_iters:
        order = rng.permutation(len(x))
        for start in range(0, len(x), cfg.batch_size):
            if iterations >= cfg.max_iters:
                break
            delta = uap_step(delta, x[order[start:start + cfg.batch_size]], frozen,
                             cfg.alpha, cfg.epsilon, cfg.paper_sign, cfg.clamp_pseudo)
            iterations += 1
        rate = attack_rate(frozen, x, delta, cfg.clamp_pseudo)
        if rate > best_rate:
            best_rate, best_delta = rate, delta

    if rate >= cfg.sigma:
        logger.info("Stage %s UAP reached attack rate %.4f after %s iterations", stage_id, rate, iterations)
        return Perturbation(delta=delta, epsilon=cfg.epsilon, stage_id=stage_id,
                            achieved_attack_rate=rate, iterations_used=iterations)

    logger.warning("Stage %s UAP did not reach sigma=%s within %s iterations; best attack rate %.4f",
                   stage_id, cfg.sigma, cfg.max_iters, best_rate)
    return Perturbation(delta=best_delta, epsilon=cfg.epsilon, stage_id=stage_id,
                        achieved_attack_rate=best_rate, iterations_used=iterations, sigma_reached=False)


def encode_uap(p: Perturbation) -> bytes:
    delta = np.ascontiguousarray(p.delta, dtype='<f4')
    if delta.ndim != 3:
        raise ShapeMismatch(f"Perturbation delta must be (C, H, W), got {delta.shape}")
    header = _UAP_HEADER.pack(UAP_MAGIC, UAP_VERSION, *delta.shape, p.epsilon,
                              p.achieved_attack_rate, p.stage_id, p.iterations_used)
    return header + delta.tobytes()


def save_uap(p: Perturbation, path: str | Path) -> Path:
    """Write one perturbation as an HDPU file."""
    path = Path(path)
    return store_or_raise(to_store(file_name=path.name, content=encode_uap(p), base_path=path.parent))


def load_uap(path: str | Path) -> Perturbation:
    """Read one HDPU file.

    Raises:
        CorruptFile: On a wrong magic or a body of the wrong length.
        VersionMismatch: On an unsupported format version.
    """
    blob = Path(path).read_bytes()
    if len(blob) < _UAP_HEADER.size:
        raise CorruptFile(f"{path}: file too short for a UAP header")
    magic, version, c, h, w, epsilon, rate, stage_id, iterations = _UAP_HEADER.unpack_from(blob)
    if magic != UAP_MAGIC:
        raise CorruptFile(f"{path}: bad magic {magic!r}")
    if version != UAP_VERSION:
        raise VersionMismatch(f"{path}: UAP version {version}, expected {UAP_VERSION}")
    body = blob[_UAP_HEADER.size:]
    if len(body) != c * h * w * 4:
        raise CorruptFile(f"{path}: expected {c * h * w * 4} delta bytes, found {len(body)}")
    delta = np.frombuffer(body, dtype='<f4').reshape(c, h, w).astype(np.float32)
    return Perturbation(delta=delta, epsilon=float(epsilon), stage_id=stage_id,
                        achieved_attack_rate=float(rate), iterations_used=iterations)


def uap_file_name(stage_id: int) -> str:
    return f"uap_stage_{stage_id:03d}.hdpu"


def pool_append(pool: UAPPool, p: Perturbation) -> UAPPool:
    """Append a perturbation, keeping stage ids strictly increasing without gaps.

    Raises:
        DuplicateStage: If the pool already holds this stage or a later one.
        PoolOrderError: If stage ids would skip a stage.
        ShapeMismatch: If the delta shape differs from the pooled ones.
    """
    if pool.perturbations:
        last = pool.perturbations[-1]
        if p.stage_id <= last.stage_id:
            raise DuplicateStage(f"Pool already holds stage {last.stage_id}; cannot append stage {p.stage_id}")
        if p.stage_id != last.stage_id + 1:
            raise PoolOrderError(f"Pool ends at stage {last.stage_id}; next must be {last.stage_id + 1}, "
                                 f"got {p.stage_id}")
        if p.delta.shape != last.delta.shape:
            raise ShapeMismatch(f"Perturbation shape {p.delta.shape} differs from pool shape {last.delta.shape}")
    elif p.stage_id < 1:
        raise PoolOrderError(f"Stage ids start at 1, got {p.stage_id}")
    pool.perturbations.append(p)
    return pool


def _manifest_entry(p: Perturbation) -> dict:
    return {
        'stage_id': p.stage_id,
        'file': uap_file_name(p.stage_id),
        'epsilon': p.epsilon,
        'attack_rate': p.achieved_attack_rate,
        'iterations_used': p.iterations_used,
        'sigma_reached': p.sigma_reached,
    }


def pool_save(pool: UAPPool, path: str | Path) -> Path:
    """Write every perturbation plus manifest.json into a pool directory.

    Returns:
        Path of the manifest.
    """
    path = Path(path)
    for p in pool.perturbations:
        save_uap(p, path / uap_file_name(p.stage_id))
    manifest = [_manifest_entry(p) for p in pool.perturbations]
    pool.path = path
    return store_or_raise(json_to_store(file_name=POOL_MANIFEST, payload=manifest, base_path=path))


def pool_load(path: str | Path) -> UAPPool:
    """Read a pool directory written by pool_save().

    Raises:
        CorruptFile: On a missing or malformed manifest, or a file whose stage id
            disagrees with its manifest entry.
    """
    path = Path(path)
    try:
        manifest = json.loads((path / POOL_MANIFEST).read_text(encoding='utf-8'))
    except (OSError, json.JSONDecodeError) as e:
        raise CorruptFile(f"{path}: unreadable pool manifest ({e})") from e

    pool = UAPPool(path=path)
    for entry in manifest:
        try:
            p = load_uap(path / entry['file'])
            stage_id = int(entry['stage_id'])
        except (KeyError, TypeError, ValueError) as e:
            raise CorruptFile(f"{path}: bad manifest entry {entry!r}") from e
        if p.stage_id != stage_id:
            raise CorruptFile(f"{path}: {entry['file']} holds stage {p.stage_id}, manifest says {stage_id}")
        p = replace(p,
                    epsilon=float(entry.get('epsilon', p.epsilon)),
                    sigma_reached=bool(entry.get('sigma_reached', True)))
        pool_append(pool, p)
    return pool

