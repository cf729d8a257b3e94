"""Loss terms of the historical distribution preserving objective.

All functions take torch tensors and return 0-d tensors, so they are differentiable
and can be checked with `torch.autograd.gradcheck`. Plain arrays and lists are
accepted too and converted to float64 tensors.

Loss Functions:
    - bce(): Binary cross entropy on probabilities (labels 1 = fake)
    - pseudo_entropy(): Cross entropy of pseudo-forged predictions against the fake label
    - feat_mse(): Feature distillation distance between student and teacher features
    - total_loss(): ce + E + beta * (L_r + L_p), returned as a LossBreakdown

Probabilities are clamped to [1e-7, 1 - 1e-7] before taking logs.
"""

from dataclasses import dataclass, fields
from typing import Literal

import torch

from hdp_lab.errors import EmptyBatch, LengthMismatch, NonFinite, ShapeMismatch

PROB_CLAMP = 1e-7

DistillMode = Literal['sq_l2', 'mse']


def _tensor(values) -> torch.Tensor:
    if isinstance(values, torch.Tensor):
        return values
    return torch.as_tensor(values, dtype=torch.float64)


def bce(probs, labels) -> torch.Tensor:
    """Binary cross entropy -mean[y log p + (1 - y) log(1 - p)].

    Args:
        probs: Probabilities of "fake", shape (N,).
        labels: Labels in {0, 1}, shape (N,).

    Returns:
        0-d tensor.

    Raises:
        LengthMismatch: If probs and labels differ in length.
        EmptyBatch: If N == 0.

    Examples:
        >>> float(bce([0.5, 0.5], [1, 0]))
        0.6931471805599453
    """
    p = _tensor(probs).reshape(-1)
    y = _tensor(labels).reshape(-1).to(p.dtype)
    if p.numel() != y.numel():
        raise LengthMismatch(f"probs has {p.numel()} entries, labels has {y.numel()}")
    if p.numel() == 0:
        raise EmptyBatch("bce of an empty batch")
    p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()


def pseudo_entropy(probs) -> torch.Tensor:
    """Cross entropy of pseudo-forged predictions against the fake label, -mean[log p].

    Identical to bce(probs, ones).
    """
    p = _tensor(probs).reshape(-1)
    if p.numel() == 0:
        raise EmptyBatch("pseudo_entropy of an empty batch")
    return bce(p, torch.ones_like(p))


def feat_mse(a, b, mode: DistillMode = 'sq_l2') -> torch.Tensor:
    """Distance between two feature batches.

    Args:
        a: Features (N, d).
        b: Features (N, d).
        mode: 'sq_l2' for the batch mean of squared L2 distances, 'mse' for the
            mean over every element (sq_l2 divided by d).

    Returns:
        0-d tensor.

    Raises:
        ShapeMismatch: If the shapes differ.
        EmptyBatch: If N == 0.
    """
    a, b = _tensor(a), _tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"Feature shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim == 0 or a.shape[0] == 0:
        raise EmptyBatch("feat_mse of an empty batch")
    diff = (a - b).reshape(a.shape[0], -1)
    if mode == 'sq_l2':
        return (diff ** 2).sum(dim=1).mean()
    if mode == 'mse':
        return (diff ** 2).mean()
    raise ValueError(f"Unknown distillation mode: {mode}")


@dataclass(frozen=True)
class LossBreakdown:
    """Components of the per-batch objective.

    Fields hold either floats or 0-d tensors; `item()` returns the float version.
    """
    ce: float | torch.Tensor
    pseudo_entropy: float | torch.Tensor
    distill_real: float | torch.Tensor
    distill_pseudo: float | torch.Tensor
    total: float | torch.Tensor
    beta: float = 1.0

    def item(self) -> 'LossBreakdown':
        return LossBreakdown(**{f.name: _as_float(getattr(self, f.name)) for f in fields(self)})

    def to_dict(self) -> dict:
        return {f.name: _as_float(getattr(self, f.name)) for f in fields(self) if f.name != 'beta'}


def _as_float(v) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


def total_loss(ce, E, l_r, l_p, beta: float) -> LossBreakdown:
    """Compose ce + E + beta * (l_r + l_p).

    Args:
        ce: Cross entropy on the real/fake batch.
        E: Pseudo-forged entropy.
        l_r: Real-feature distillation.
        l_p: Pseudo-feature distillation.
        beta: Weight of the distillation terms, >= 0.

    Returns:
        LossBreakdown whose total is differentiable when the components are tensors.

    Raises:
        NonFinite: If any component is NaN or infinite.
        ValueError: If beta is negative.
    """
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    for name, value in (('ce', ce), ('pseudo_entropy', E), ('distill_real', l_r), ('distill_pseudo', l_p)):
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise NonFinite(f"Loss component {name} is not finite: {_as_float(value)}")

    total = ce + E + beta * (l_r + l_p)
    return LossBreakdown(ce=ce, pseudo_entropy=E, distill_real=l_r, distill_pseudo=l_p, total=total, beta=beta)
