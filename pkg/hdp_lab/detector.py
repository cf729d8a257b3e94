"""Binary real/fake detector: feature extractor g plus a linear head.

A `Detector` is a torch module made of an extractor (image -> d-dimensional feature)
and a linear head (feature -> one logit). The probability of "fake" is the logistic
of the logit; prediction thresholds it at 0.5, with ties going to fake.

The extractor architecture is chosen from a small registry so loss and training code
never reference a concrete network:

    - conv3: three [3x3 conv (16/32/64 channels), ReLU, 2x2 average pool] blocks,
      global average pool, d = 64
    - linear: flattened pixels, d = C*H*W (fixed-weight logistic detectors in tests)

Typical Usage:
    >>> from hdp_lab.detector import build_detector, forward_prob, predict
    >>>
    >>> m = build_detector('conv3', input_shape=(3, 32, 32), seed=0)
    >>> probs = forward_prob(m, x)      # torch tensor in (0, 1), differentiable
    >>> labels = predict(m, x)          # torch int64 tensor of {0, 1}

Checkpoint Format:
    4-byte magic "HDPM", u32 format version, u32 metadata length, UTF-8 JSON metadata
    (arch, feature_dim, input_shape, stage, params: list of [name, shape] in
    state_dict order), then the parameters as little-endian float32 in that order.
"""

from copy import deepcopy
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Tuple
import json
import struct

import numpy as np
import torch
from torch import nn

from hdp_lab import logger
from hdp_lab.errors import CorruptFile, ShapeMismatch, VersionMismatch
from hdp_lab.storage import store_or_raise, to_store

CHECKPOINT_MAGIC = b"HDPM"
CHECKPOINT_VERSION = 1
_CHECKPOINT_HEADER = struct.Struct("<4sII")


def _conv3(input_shape: Tuple[int, int, int]) -> Tuple[nn.Module, int]:
    c, h, w = input_shape
    if h < 8 or w < 8:
        raise ValueError(f"conv3 needs images of at least 8x8, got {h}x{w}")
    layers = []
    channels = (c, 16, 32, 64)
    for cin, cout in zip(channels[:-1], channels[1:]):
        layers += [nn.Conv2d(cin, cout, kernel_size=3, padding=1), nn.ReLU(), nn.AvgPool2d(2)]
    layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
    return nn.Sequential(*layers), channels[-1]


def _linear(input_shape: Tuple[int, int, int]) -> Tuple[nn.Module, int]:
    return nn.Flatten(), int(np.prod(input_shape))


ARCHITECTURES: Dict[str, Callable[[Tuple[int, int, int]], Tuple[nn.Module, int]]] = {
    'conv3': _conv3,
    'linear': _linear,
}


class Detector(nn.Module):
    """Feature extractor followed by a single-logit linear head.

    Attributes:
        extractor: Module mapping (N, C, H, W) images to (N, d) features.
        head: nn.Linear(d, 1).
        arch: Registry name of the extractor.
        feature_dim: d.
        input_shape: Declared (C, H, W).
        stage: Stage after which the parameters were produced (0 = untrained).
    """

    def __init__(self, arch: str, input_shape: Tuple[int, int, int], stage: int = 0):
        super().__init__()
        if arch not in ARCHITECTURES:
            raise ValueError(f"Unknown architecture: {arch}. Expected one of {sorted(ARCHITECTURES)}.")
        self.arch = arch
        self.input_shape = tuple(int(v) for v in input_shape)
        self.extractor, self.feature_dim = ARCHITECTURES[arch](self.input_shape)
        self.head = nn.Linear(self.feature_dim, 1)
        self.stage = stage

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.extractor(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Return one logit per image, shape (N,)."""
        return self.head(self.extractor(x)).squeeze(-1)

    def metadata(self) -> dict:
        return {
            'arch': self.arch,
            'feature_dim': self.feature_dim,
            'input_shape': list(self.input_shape),
            'stage': self.stage,
        }


@dataclass(frozen=True)
class Checkpoint:
    path: Path
    arch: str
    feature_dim: int
    input_shape: Tuple[int, int, int]
    stage: int
    version: int = CHECKPOINT_VERSION


def build_detector(arch: str = 'conv3',
                   input_shape: Tuple[int, int, int] = (3, 32, 32),
                   seed: int = 0) -> Detector:
    """Create a freshly initialized detector.

    Initialization draws from a forked torch RNG seeded with `seed`, so the global
    torch RNG state is left untouched and the same seed gives the same weights.

    Args:
        arch: Architecture name ('conv3' or 'linear').
        input_shape: (C, H, W) of the images.
        seed: Initialization seed.

    Returns:
        Detector in train mode, float32, on CPU.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Detector(arch, input_shape)


def _as_batch(m: Detector, batch) -> torch.Tensor:
    param = next(m.parameters())
    x = torch.as_tensor(batch, dtype=param.dtype, device=param.device)
    if x.ndim != 4 or tuple(x.shape[1:]) != m.input_shape:
        raise ShapeMismatch(f"Expected a batch of shape (N, {', '.join(map(str, m.input_shape))}), "
                            f"got {tuple(x.shape)}")
    return x


def forward_prob(m: Detector, batch) -> torch.Tensor:
    """Probability of "fake" for each image, differentiable w.r.t. inputs and parameters.

    Raises:
        ShapeMismatch: If the batch is not (N, C, H, W) with the declared (C, H, W).
    """
    return torch.sigmoid(m(_as_batch(m, batch)))


def logits(m: Detector, batch) -> torch.Tensor:
    return m(_as_batch(m, batch))


def predict(m: Detector, batch) -> torch.Tensor:
    """1 where forward_prob >= 0.5 (ties go to fake), else 0."""
    with torch.no_grad():
        return (forward_prob(m, batch) >= 0.5).to(torch.int64)


def features(m: Detector, batch) -> torch.Tensor:
    """Extractor output g(x), shape (N, d)."""
    return m.features(_as_batch(m, batch))


def clone_frozen(m: Detector) -> Detector:
    """Deep copy in eval mode whose parameters never require gradients."""
    clone = deepcopy(m)
    clone.eval()
    for p in clone.parameters():
        p.requires_grad_(False)
    return clone


def save_checkpoint(m: Detector, path: str | Path) -> Checkpoint:
    """Write a detector to an HDPM checkpoint file.

    Args:
        m: Detector to save.
        path: Output file path. Parent directories are created.

    Returns:
        Checkpoint describing the written file.

    Raises:
        IOFailure: If the file cannot be written.
    """
    path = Path(path)
    state = m.state_dict()
    meta = m.metadata()
    meta['params'] = [[name, list(t.shape)] for name, t in state.items()]
    meta_blob = json.dumps(meta, sort_keys=True).encode('utf-8')

    body = b"".join(t.detach().cpu().numpy().astype('<f4').tobytes() for t in state.values())
    content = _CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(meta_blob)) + meta_blob + body

    store_or_raise(to_store(file_name=path.name, content=content, base_path=path.parent))
    return Checkpoint(path=path, arch=m.arch, feature_dim=m.feature_dim,
                      input_shape=m.input_shape, stage=m.stage)


def load_checkpoint(path: str | Path) -> Detector:
    """Read a detector from an HDPM checkpoint file.

    Raises:
        CorruptFile: On a wrong magic, unreadable metadata or a body of the wrong size.
        VersionMismatch: If the file's format version is not supported.
    """
    blob = Path(path).read_bytes()
    if len(blob) < _CHECKPOINT_HEADER.size:
        raise CorruptFile(f"{path}: file too short for a checkpoint header")

    magic, version, meta_len = _CHECKPOINT_HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise CorruptFile(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")

    offset = _CHECKPOINT_HEADER.size
    try:
        meta = json.loads(blob[offset:offset + meta_len].decode('utf-8'))
        m = Detector(meta['arch'], tuple(meta['input_shape']), stage=int(meta['stage']))
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, ValueError) as e:
        raise CorruptFile(f"{path}: unreadable metadata ({e})") from e
    offset += meta_len

    expected = sum(int(np.prod(shape)) for _, shape in meta['params'])
    if len(blob) - offset != expected * 4:
        raise CorruptFile(f"{path}: expected {expected * 4} parameter bytes, found {len(blob) - offset}")
    body = np.frombuffer(blob, dtype='<f4', offset=offset)

    state, pos = {}, 0
    for name, shape in meta['params']:
        n = int(np.prod(shape))
        state[name] = torch.from_numpy(body[pos:pos + n].astype(np.float32).reshape(shape))
        pos += n
    try:
        m.load_state_dict(state)
    except RuntimeError as e:
        raise CorruptFile(f"{path}: parameters do not match architecture {meta['arch']} ({e})") from e

    logger.info("Loaded %s detector (stage %s) from %s", m.arch, m.stage, path)
    return m
