"""Procedural real images, parametric forgeries and multi-stage protocols.

This module generates every image hdp-lab trains and evaluates on. "Real" images are
clamped sums of coloured 2-D Gaussian blobs plus low-pass filtered noise; the blob
statistics, noise spectrum and colour palette are set by a `DomainParams`, so two
domains differ the way two source datasets differ. "Fake" images are real images,
drawn fresh for the purpose, passed through one `ManipulationSpec` (blend with a
donor, band-pass noise patch, patch shuffle, smoothing, sharpening or colour shift)
inside an elliptical region. BLEND donors come from the stage's donor domain when it
sets one, so a splice carries the statistics of another source.

A `ProtocolSpec` lists the stages of a continual sequence; `build_protocol()` turns it
into one `StageDataset` per stage. Generation is a pure function of the spec: each
sample's seed is derived from (global_seed, stage_id, role, index), so datasets are
reconstructed rather than cached.

Presets:
    - p1: 4 stages sharing one domain, 4 distinct manipulation kinds
    - p2: 4 stages with pairwise distinct domains and manipulations
    - p3: 10 stages interleaving the p1 domain with the p2 domains

    Every preset stage is separable by the conv3 detector at default TrainConfig
    (>= 90% test ACC when trained alone). COLOR_SHIFT is left out of the presets: a
    +/-20% channel gain hides inside the spread of palette mixtures.

Typical Usage:
    >>> from hdp_lab.synthdata import preset_protocol, build_protocol
    >>>
    >>> spec = preset_protocol('p1', global_seed=0, train_size=200, test_size=50)
    >>> stages = build_protocol(spec)
    >>> x_train, y_train = stages[0].arrays('train')

Binary Image Format (dump_stage / read_image):
    4-byte magic "HDPI", u32 C, u32 H, u32 W (little-endian), then C*H*W little-endian
    float32 pixels in C-order. The directory also holds index.json with one entry per
    image: file, split, stage_id, label, manipulation kind, seed.
"""

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Literal, Optional, Tuple
import json
import struct

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from hdp_lab import logger
from hdp_lab._utils import SEED_DATA, _derive_seed
from hdp_lab.errors import CorruptFile, MissingDonor, ShapeMismatch
from hdp_lab.storage import json_to_store, store_or_raise, to_store

Image = np.ndarray

IMAGE_MAGIC = b"HDPI"
_IMAGE_HEADER = struct.Struct("<4sIII")

_PALETTE_SIZE = 5
_PATCH = 4

# Roles mixed into per-sample seeds.
_ROLE_TRAIN_REAL = 0
_ROLE_TRAIN_FAKE = 1
_ROLE_TEST_REAL = 2
_ROLE_TEST_FAKE = 3
_ROLE_DONOR_OFFSET = 4
_ROLE_MANIP_OFFSET = 8
_ROLE_JITTER_OFFSET = 12

_REGION_JITTER = 0.08

NOISE_PATCH_AMPLITUDE = 0.15
COLOR_SHIFT_GAIN = 0.2


class ManipulationKind(str, Enum):
    BLEND = "BLEND"
    NOISE_PATCH = "NOISE_PATCH"
    PATCH_SHUFFLE = "PATCH_SHUFFLE"
    SMOOTH = "SMOOTH"
    SHARPEN = "SHARPEN"
    COLOR_SHIFT = "COLOR_SHIFT"


class Region(BaseModel):
    """Elliptical manipulation region, centre and radii as fractions of H and W."""
    model_config = ConfigDict(frozen=True)

    center_y: float = Field(default=0.5, ge=0.0, le=1.0)
    center_x: float = Field(default=0.5, ge=0.0, le=1.0)
    radius_y: float = Field(default=0.3, gt=0.0, le=1.0)
    radius_x: float = Field(default=0.3, gt=0.0, le=1.0)


class DomainParams(BaseModel):
    """Parameters of one "real" image domain.

    Attributes:
        blob_count: Number of Gaussian blobs per image (>= 1).
        blob_scale: Blob standard deviation as a fraction of min(H, W) (> 0).
        noise_cutoff: Radial low-pass cutoff as a fraction of the highest spatial
            frequency, in (0, 1].
        noise_amp: Standard deviation of the added filtered noise, in [0, 0.5].
        palette_seed: Seed of the domain's colour palette.
    """
    model_config = ConfigDict(frozen=True)

    blob_count: int = Field(ge=1)
    blob_scale: float = Field(gt=0.0)
    noise_cutoff: float = Field(gt=0.0, le=1.0)
    noise_amp: float = Field(ge=0.0, le=0.5)
    palette_seed: int = Field(ge=0)


class ManipulationSpec(BaseModel):
    """A parametric forgery applied inside an elliptical region.

    Strength 0 is the identity for every kind.
    """
    model_config = ConfigDict(frozen=True)

    kind: ManipulationKind
    strength: float = Field(ge=0.0, le=1.0)
    region: Region = Region()
    seed: int = Field(default=0, ge=0)


class StageSizes(BaseModel):
    """Per-class sample counts of one stage."""
    model_config = ConfigDict(frozen=True)

    train: int = Field(default=1000, ge=8)
    test: int = Field(default=200, ge=8)


class StageSpec(BaseModel):
    """One protocol stage. `donor` is the domain BLEND donors are drawn from; None
    means the stage's own domain."""
    model_config = ConfigDict(frozen=True)

    domain: DomainParams
    manipulation: ManipulationSpec
    sizes: StageSizes = StageSizes()
    donor: Optional[DomainParams] = None


class ProtocolSpec(BaseModel):
    """Ordered definition of a continual protocol.

    All stages share the image shape (channels, height, width).
    """
    model_config = ConfigDict(frozen=True)

    name: str
    stages: List[StageSpec]
    global_seed: int = Field(default=0, ge=0)
    channels: int = Field(default=3, ge=1)
    height: int = Field(default=32, ge=8)
    width: int = Field(default=32, ge=8)

    @model_validator(mode="after")
    def _check_stages(self):
        if len(self.stages) < 2:
            raise ValueError("a protocol needs at least 2 stages")
        return self

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return self.channels, self.height, self.width


@dataclass(frozen=True)
class Sample:
    """One labelled image.

    Attributes:
        image: Float32 array of shape (C, H, W) in [0, 1].
        label: 0 for real, 1 for fake.
        stage_id: Stage the sample belongs to (>= 1).
        manipulation: The forgery applied, present iff label == 1.
        seed: Generation seed of the image; for fakes, the seed of the real
            image the forgery was applied to.
        index: Position within its split and class.
    """
    image: Image
    label: int
    stage_id: int
    manipulation: Optional[ManipulationSpec] = None
    seed: int = 0
    index: int = 0

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if (self.label == 1) != (self.manipulation is not None):
            raise ValueError("label 1 requires a manipulation and label 0 forbids one")
        if self.stage_id < 1:
            raise ValueError(f"stage_id must be >= 1, got {self.stage_id}")


@dataclass
class StageDataset:
    """Train and test splits of one stage, balanced by class."""
    stage_id: int
    train_real: List[Sample] = field(default_factory=list)
    train_fake: List[Sample] = field(default_factory=list)
    test_real: List[Sample] = field(default_factory=list)
    test_fake: List[Sample] = field(default_factory=list)

    def samples(self, split: Literal["train", "test"]) -> List[Sample]:
        if split == "train":
            return self.train_real + self.train_fake
        if split == "test":
            return self.test_real + self.test_fake
        raise ValueError(f"Unknown split: {split}")

    def arrays(self, split: Literal["train", "test"]) -> Tuple[np.ndarray, np.ndarray]:
        """Stack a split into (images N x C x H x W float32, labels N int64)."""
        return stack_samples(self.samples(split))

    @property
    def image_shape(self) -> Tuple[int, ...]:
        for s in self.train_real or self.test_real:
            return tuple(s.image.shape)
        raise ValueError(f"Stage {self.stage_id} has no samples")


def stack_samples(samples: List[Sample]) -> Tuple[np.ndarray, np.ndarray]:
    """Stack samples into an image array and a label array."""
    if not samples:
        return np.zeros((0,), dtype=np.float32), np.zeros((0,), dtype=np.int64)
    x = np.stack([s.image for s in samples]).astype(np.float32, copy=False)
    y = np.array([s.label for s in samples], dtype=np.int64)
    return x, y


def _palette(palette_seed: int, channels: int) -> np.ndarray:
    return np.random.default_rng(palette_seed).uniform(0.2, 1.0, size=(_PALETTE_SIZE, channels))


def _draw_blobs(rng: np.random.Generator,
                domain: DomainParams,
                channels: int,
                height: int,
                width: int):
    """Draw blob centres (n, 2), sigmas (n,), amplitudes (n,) and colours (n, C).

    gen_real_image() calls this first on the sample generator, so the layout of
    any image can be recovered from its seed.
    """
    palette = _palette(domain.palette_seed, channels)
    n = domain.blob_count
    centers = rng.uniform((0.0, 0.0), (height - 1.0, width - 1.0), size=(n, 2))
    sigmas = domain.blob_scale * min(height, width) * rng.uniform(0.7, 1.3, size=n)
    amps = rng.uniform(0.5, 1.0, size=n)
    colors = palette[rng.integers(0, _PALETTE_SIZE, size=n)]
    return centers, sigmas, amps, colors


def _lowpass_noise(rng: np.random.Generator, shape: Tuple[int, int, int], cutoff: float) -> np.ndarray:
    """Unit-variance white noise with frequencies above the radial cutoff removed."""
    _, h, w = shape
    white = rng.standard_normal(shape)
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    radius = np.sqrt(fy ** 2 + fx ** 2) / np.sqrt(0.5)
    mask = radius <= cutoff
    filtered = np.real(np.fft.ifft2(np.fft.fft2(white, axes=(-2, -1)) * mask, axes=(-2, -1)))
    std = filtered.std()
    if std > 0:
        filtered = filtered / std
    return filtered


def _box_residual(x: np.ndarray) -> np.ndarray:
    """boxblur3x3(x) - x with edge padding, per channel.

    Accumulated as neighbour-minus-centre differences, so it is exactly zero
    wherever the 3x3 neighbourhood is constant.
    """
    _, h, w = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")
    acc = np.zeros_like(x, dtype=np.float64)
    for dy in range(3):
        for dx in range(3):
            acc += padded[:, dy:dy + h, dx:dx + w] - x
    return acc / 9.0


def box_blur(x: Image) -> np.ndarray:
    """3x3 box blur with edge padding."""
    x64 = np.asarray(x, dtype=np.float64)
    return x64 + _box_residual(x64)


def high_frequency_energy(images: np.ndarray) -> float:
    """Mean squared residual between images and their 3x3 box blur."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    return float(np.mean([np.mean(_box_residual(img) ** 2) for img in arr]))


def _region_mask(region: Region, height: int, width: int) -> np.ndarray:
    yy = (np.arange(height)[:, None] + 0.5) / height
    xx = (np.arange(width)[None, :] + 0.5) / width
    dist = ((yy - region.center_y) / region.radius_y) ** 2 + ((xx - region.center_x) / region.radius_x) ** 2
    return (dist <= 1.0).astype(np.float64)


def gen_real_image(domain: DomainParams,
                   sample_seed: int,
                   shape: Tuple[int, int, int] = (3, 32, 32)) -> Image:
    """Generate one deterministic "real" image.

    The image is the clamped sum of `blob_count` coloured Gaussian bumps plus
    low-pass filtered noise of standard deviation `noise_amp`.

    Args:
        domain: Domain parameters.
        sample_seed: Per-sample seed (>= 0).
        shape: (C, H, W). Defaults to (3, 32, 32).

    Returns:
        Float32 array of the given shape with values in [0, 1].

    Raises:
        ValueError: If sample_seed is negative.
    """
    if sample_seed < 0:
        raise ValueError(f"sample_seed must be >= 0, got {sample_seed}")

    c, h, w = shape
    rng = np.random.default_rng(sample_seed)
    centers, sigmas, amps, colors = _draw_blobs(rng, domain, c, h, w)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((c, h, w), dtype=np.float64)
    for (cy, cx), sigma, amp, color in zip(centers, sigmas, amps, colors):
        bump = amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma ** 2))
        img += color[:, None, None] * bump[None]

    if domain.noise_amp > 0:
        img += domain.noise_amp * _lowpass_noise(rng, (c, h, w), domain.noise_cutoff)

    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _shuffle_patches(x: np.ndarray, region: Region, rng: np.random.Generator) -> np.ndarray:
    """Permute the 4x4 patches whose centre lies inside the region."""
    _, h, w = x.shape
    mask = _region_mask(region, h, w)
    cells = [(i, j)
             for i in range(h // _PATCH)
             for j in range(w // _PATCH)
             if mask[i * _PATCH + _PATCH // 2, j * _PATCH + _PATCH // 2] > 0]
    if len(cells) < 2:
        return x.copy()

    perm = rng.permutation(len(cells))
    if np.array_equal(perm, np.arange(len(cells))):
        perm = np.roll(perm, 1)

    out = x.copy()
    for dst, src in zip(cells, perm):
        si, sj = cells[src]
        di, dj = dst
        out[:, di * _PATCH:(di + 1) * _PATCH, dj * _PATCH:(dj + 1) * _PATCH] = \
            x[:, si * _PATCH:(si + 1) * _PATCH, sj * _PATCH:(sj + 1) * _PATCH]
    return out


def color_shift_gain(strength: float, seed: int, channels: int) -> np.ndarray:
    """Per-channel COLOR_SHIFT gains 1 +/- 0.2*strength.

    The signs depend on the seed only. With more than one channel they are never all
    equal, so the shift changes hue rather than brightness.
    """
    signs = np.random.default_rng(seed).choice(np.array([-1.0, 1.0]), size=channels)
    if channels > 1 and np.all(signs == signs[0]):
        signs[-1] = -signs[-1]
    return 1.0 + COLOR_SHIFT_GAIN * strength * signs


def apply_manipulation(img: Image,
                       spec: ManipulationSpec,
                       donor: Optional[Image] = None) -> Image:
    """Apply a parametric forgery to a copy of an image.

    Semantics inside the region mask m, with s = strength:
        - BLEND: x + s*m*(donor - x)
        - NOISE_PATCH: x + m*n, n band-pass noise of standard deviation 0.15*s
          (amplitude in the sense of DomainParams.noise_amp)
        - PATCH_SHUFFLE: x + s*(shuffle(x) - x), 4x4 patches of the region permuted
        - SMOOTH: x + s*m*(boxblur(x) - x)
        - SHARPEN: x + s*m*(x - boxblur(x))
        - COLOR_SHIFT: per-channel gain 1 +/- 0.2*s inside the region, signs drawn
          from the seed with at least one channel of each sign
    The result is clamped to [0, 1]. The input array is never modified.

    Args:
        img: Float array (C, H, W).
        spec: Manipulation to apply. Its seed drives any randomness.
        donor: Donor image, required iff spec.kind is BLEND.

    Returns:
        Manipulated float32 copy.

    Raises:
        MissingDonor: If kind is BLEND and donor is None.
        ShapeMismatch: If donor shape differs from img shape.
    """
    if spec.kind == ManipulationKind.BLEND and donor is None:
        raise MissingDonor("BLEND manipulation requires a donor image")
    if donor is not None and np.shape(donor) != np.shape(img):
        raise ShapeMismatch(f"Donor shape {np.shape(donor)} differs from image shape {np.shape(img)}")

    x = np.asarray(img, dtype=np.float32)
    if spec.strength == 0:
        return x.copy()

    x64 = x.astype(np.float64)
    c, h, w = x64.shape
    s = spec.strength
    m = _region_mask(spec.region, h, w)[None]
    rng = np.random.default_rng(spec.seed)

    match spec.kind:
        case ManipulationKind.BLEND:
            out = x64 + s * m * (np.asarray(donor, dtype=np.float32).astype(np.float64) - x64)
        case ManipulationKind.NOISE_PATCH:
            noise = rng.standard_normal(x64.shape)
            high = -_box_residual(noise)
            band = high + _box_residual(high)
            std = band.std()
            band = band * (NOISE_PATCH_AMPLITUDE * s / std) if std > 0 else band
            out = x64 + m * band
        case ManipulationKind.PATCH_SHUFFLE:
            out = x64 + s * (_shuffle_patches(x64, spec.region, rng) - x64)
        case ManipulationKind.SMOOTH:
            out = x64 + s * m * _box_residual(x64)
        case ManipulationKind.SHARPEN:
            out = x64 - s * m * _box_residual(x64)
        case ManipulationKind.COLOR_SHIFT:
            gain = color_shift_gain(s, spec.seed, c)
            out = x64 + m * (gain[:, None, None] - 1.0) * x64
        case _:
            raise ValueError(f"Unsupported manipulation kind: {spec.kind}")

    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _jittered(spec: ManipulationSpec, manip_seed: int, jitter_seed: int) -> ManipulationSpec:
    """Per-sample copy of a stage manipulation: region centre moved by up to
    +/-_REGION_JITTER, kind and strength kept.

    COLOR_SHIFT keeps the stage seed so every fake of a stage shares one gain
    direction; the other kinds reseed per sample.
    """
    rng = np.random.default_rng(jitter_seed)
    dy, dx = rng.uniform(-_REGION_JITTER, _REGION_JITTER, size=2)
    region = spec.region.model_copy(update={
        'center_y': float(np.clip(spec.region.center_y + dy, 0.0, 1.0)),
        'center_x': float(np.clip(spec.region.center_x + dx, 0.0, 1.0)),
    })
    seed = spec.seed if spec.kind == ManipulationKind.COLOR_SHIFT else manip_seed
    return spec.model_copy(update={'seed': seed, 'region': region})


def _make_split(entry: StageSpec,
                stage_id: int,
                seed: int,
                shape: Tuple[int, int, int],
                count: int,
                real_role: int,
                fake_role: int) -> Tuple[List[Sample], List[Sample]]:
    reals, fakes = [], []
    for i in range(count):
        real_seed = _derive_seed(SEED_DATA, seed, stage_id, real_role, i)
        reals.append(Sample(image=gen_real_image(entry.domain, real_seed, shape),
                            label=0, stage_id=stage_id, seed=real_seed, index=i))

    for i in range(count):
        source_seed = _derive_seed(SEED_DATA, seed, stage_id, fake_role, i)
        source = gen_real_image(entry.domain, source_seed, shape)
        spec = _jittered(entry.manipulation,
                         manip_seed=_derive_seed(SEED_DATA, seed, stage_id, fake_role + _ROLE_MANIP_OFFSET, i),
                         jitter_seed=_derive_seed(SEED_DATA, seed, stage_id, fake_role + _ROLE_JITTER_OFFSET, i))
        donor = None
        if spec.kind == ManipulationKind.BLEND:
            donor_seed = _derive_seed(SEED_DATA, seed, stage_id, fake_role + _ROLE_DONOR_OFFSET, i)
            donor = gen_real_image(entry.donor or entry.domain, donor_seed, shape)
        fakes.append(Sample(image=apply_manipulation(source, spec, donor),
                            label=1, stage_id=stage_id, manipulation=spec, seed=source_seed, index=i))
    return reals, fakes


def build_stage(entry: StageSpec,
                *,
                stage_id: int = 1,
                seed: int = 0,
                image_shape: Tuple[int, int, int] = (3, 32, 32),
                sizes: Optional[StageSizes] = None) -> StageDataset:
    """Build the balanced train/test dataset of one stage.

    Fakes are manipulated copies of freshly drawn real images, never of images
    placed in the real subsets. Per-sample seeds are
    derive(global seed, stage_id, role, index) with one role per split and class,
    so train and test never share a seed.

    Args:
        entry: Stage definition (domain, manipulation, sizes).
        stage_id: 1-based stage index.
        seed: Protocol global seed.
        image_shape: (C, H, W) shared by the protocol.
        sizes: Per-class counts overriding entry.sizes.

    Returns:
        StageDataset with |train_real| == |train_fake| and |test_real| == |test_fake|.
    """
    sizes = sizes or entry.sizes
    if stage_id < 1:
        raise ValueError(f"stage_id must be >= 1, got {stage_id}")

    train_real, train_fake = _make_split(entry, stage_id, seed, image_shape, sizes.train,
                                         _ROLE_TRAIN_REAL, _ROLE_TRAIN_FAKE)
    test_real, test_fake = _make_split(entry, stage_id, seed, image_shape, sizes.test,
                                       _ROLE_TEST_REAL, _ROLE_TEST_FAKE)

    logger.info("Built stage %s: %s train / %s test samples per class (%s on %s)",
                stage_id, sizes.train, sizes.test, entry.manipulation.kind.value, entry.domain)

    return StageDataset(stage_id=stage_id, train_real=train_real, train_fake=train_fake,
                        test_real=test_real, test_fake=test_fake)


def build_protocol(ps: ProtocolSpec) -> List[StageDataset]:
    """Build one StageDataset per protocol stage, stage ids 1..T."""
    return [build_stage(entry, stage_id=t, seed=ps.global_seed, image_shape=ps.image_shape)
            for t, entry in enumerate(ps.stages, start=1)]


# Near-white noise, so SMOOTH and SHARPEN move the high-frequency energy.
_SHARED_DOMAIN = DomainParams(blob_count=6, blob_scale=0.12, noise_cutoff=0.9, noise_amp=0.07, palette_seed=101)

_DOMAINS = {
    'a': DomainParams(blob_count=5, blob_scale=0.14, noise_cutoff=0.3, noise_amp=0.03, palette_seed=201),
    'b': DomainParams(blob_count=3, blob_scale=0.22, noise_cutoff=0.4, noise_amp=0.03, palette_seed=202),
    'c': DomainParams(blob_count=9, blob_scale=0.08, noise_cutoff=0.7, noise_amp=0.08, palette_seed=203),
    'd': DomainParams(blob_count=4, blob_scale=0.18, noise_cutoff=0.9, noise_amp=0.10, palette_seed=204),
}

# Source of BLEND donors: white-ish noise on a foreign palette, spliced into smooth domains.
_SPLICE_DONOR = DomainParams(blob_count=7, blob_scale=0.10, noise_cutoff=1.0, noise_amp=0.12, palette_seed=205)

_CENTRAL = Region(center_y=0.5, center_x=0.5, radius_y=0.40, radius_x=0.40)


def _stage(domain: DomainParams,
           kind: ManipulationKind,
           strength: float,
           seed: int,
           donor: Optional[DomainParams] = None) -> Tuple[DomainParams, ManipulationSpec, Optional[DomainParams]]:
    return domain, ManipulationSpec(kind=kind, strength=strength, region=_CENTRAL, seed=seed), donor


_PRESETS = {
    # SMOOTH last: the final model learns the opposite direction of stages 1 and 2.
    'p1': [
        _stage(_SHARED_DOMAIN, ManipulationKind.SHARPEN, 1.0, 1),
        _stage(_SHARED_DOMAIN, ManipulationKind.NOISE_PATCH, 1.0, 2),
        _stage(_SHARED_DOMAIN, ManipulationKind.PATCH_SHUFFLE, 1.0, 3),
        _stage(_SHARED_DOMAIN, ManipulationKind.SMOOTH, 1.0, 4),
    ],
    'p2': [
        _stage(_DOMAINS['a'], ManipulationKind.BLEND, 0.9, 11, donor=_SPLICE_DONOR),
        _stage(_DOMAINS['b'], ManipulationKind.NOISE_PATCH, 1.0, 12),
        _stage(_DOMAINS['c'], ManipulationKind.PATCH_SHUFFLE, 1.0, 13),
        _stage(_DOMAINS['d'], ManipulationKind.SMOOTH, 1.0, 14),
    ],
    'p3': [
        _stage(_SHARED_DOMAIN, ManipulationKind.SHARPEN, 1.0, 21),
        _stage(_DOMAINS['a'], ManipulationKind.BLEND, 0.9, 22, donor=_SPLICE_DONOR),
        _stage(_SHARED_DOMAIN, ManipulationKind.NOISE_PATCH, 1.0, 23),
        _stage(_DOMAINS['c'], ManipulationKind.PATCH_SHUFFLE, 1.0, 24),
        _stage(_SHARED_DOMAIN, ManipulationKind.PATCH_SHUFFLE, 1.0, 25),
        _stage(_DOMAINS['d'], ManipulationKind.SMOOTH, 1.0, 26),
        _stage(_SHARED_DOMAIN, ManipulationKind.SMOOTH, 1.0, 27),
        _stage(_DOMAINS['b'], ManipulationKind.NOISE_PATCH, 0.9, 28),
        _stage(_DOMAINS['d'], ManipulationKind.SHARPEN, 1.0, 29),
        _stage(_DOMAINS['c'], ManipulationKind.PATCH_SHUFFLE, 0.9, 30),
    ],
}

PRESET_NAMES = tuple(_PRESETS)


def preset_protocol(name: str,
                    global_seed: int = 0,
                    train_size: int = 1000,
                    test_size: int = 200,
                    image_size: int = 32) -> ProtocolSpec:
    """Return one of the shipped protocol presets.

    Args:
        name: 'p1', 'p2' or 'p3'.
        global_seed: Seed mixed into every sample seed.
        train_size: Training samples per class per stage.
        test_size: Test samples per class per stage.
        image_size: Height and width of the square images.

    Returns:
        ProtocolSpec for the preset.

    Raises:
        ValueError: If the preset name is unknown.
    """
    if name not in _PRESETS:
        raise ValueError(f"Unknown protocol preset: {name}. Expected one of {PRESET_NAMES}.")

    sizes = StageSizes(train=train_size, test=test_size)
    return ProtocolSpec(
        name=name,
        stages=[StageSpec(domain=d, manipulation=m, sizes=sizes, donor=donor) for d, m, donor in _PRESETS[name]],
        global_seed=global_seed,
        height=image_size,
        width=image_size,
    )


def load_protocol_spec(name_or_path: str, global_seed: Optional[int] = None) -> ProtocolSpec:
    """Resolve a preset name or a ProtocolSpec JSON file.

    Args:
        name_or_path: Preset name ('p1', 'p2', 'p3') or path to a JSON file holding
            a serialized ProtocolSpec.
        global_seed: If given, overrides the spec's global seed.

    Returns:
        The resolved ProtocolSpec.
    """
    if name_or_path in _PRESETS:
        spec = preset_protocol(name_or_path)
    else:
        path = Path(name_or_path).expanduser()
        if not path.exists():
            raise ValueError(f"Unknown protocol: {name_or_path} is neither a preset nor a file")
        spec = ProtocolSpec.model_validate_json(path.read_text(encoding='utf-8'))

    if global_seed is not None:
        spec = spec.model_copy(update={'global_seed': global_seed})
    return spec


def encode_image(img: Image) -> bytes:
    """Encode an image in the HDPI binary format."""
    arr = np.asarray(img, dtype='<f4')
    if arr.ndim != 3:
        raise ShapeMismatch(f"Expected a (C, H, W) image, got shape {arr.shape}")
    return _IMAGE_HEADER.pack(IMAGE_MAGIC, *arr.shape) + np.ascontiguousarray(arr).tobytes()


def read_image(path: str | Path) -> Image:
    """Read an HDPI image file.

    Raises:
        CorruptFile: On a wrong magic or a body of the wrong length.
    """
    blob = Path(path).read_bytes()
    if len(blob) < _IMAGE_HEADER.size:
        raise CorruptFile(f"{path}: file too short for an HDPI header")
    magic, c, h, w = _IMAGE_HEADER.unpack_from(blob)
    if magic != IMAGE_MAGIC:
        raise CorruptFile(f"{path}: bad magic {magic!r}")
    body = blob[_IMAGE_HEADER.size:]
    if len(body) != c * h * w * 4:
        raise CorruptFile(f"{path}: expected {c * h * w * 4} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype='<f4').reshape(c, h, w).astype(np.float32)


def dump_stage(stage: StageDataset, path: str | Path) -> Path:
    """Write a stage as a directory of HDPI images plus index.json.

    Args:
        stage: Stage to dump.
        path: Output directory.

    Returns:
        Path of the written index.json.
    """
    index = []
    for split in ('train', 'test'):
        for sample in stage.samples(split):
            file_name = f"{split}_{sample.label}_{sample.index:05d}.hdpi"
            store_or_raise(to_store(file_name=file_name, content=encode_image(sample.image),
                                    base_path=path, folder='images'))
            index.append({
                'file': f"images/{file_name}",
                'split': split,
                'stage_id': sample.stage_id,
                'label': sample.label,
                'manipulation': sample.manipulation.kind.value if sample.manipulation else None,
                'seed': sample.seed,
            })

    logger.info("Dumped %s images of stage %s to %s", len(index), stage.stage_id, path)
    return store_or_raise(json_to_store(file_name='index.json', payload=index, base_path=path))


def load_index(path: str | Path) -> list:
    """Read the index.json written by dump_stage()."""
    return json.loads((Path(path) / 'index.json').read_text(encoding='utf-8'))
