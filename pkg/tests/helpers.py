"""Tiny protocols and fixed-weight linear detectors shared by the tests."""

import torch

from hdp_lab.detector import build_detector
from hdp_lab.synthdata import (DomainParams, ManipulationKind, ManipulationSpec, ProtocolSpec, Region, StageSizes,
                               StageSpec)

TINY_DOMAIN = DomainParams(blob_count=3, blob_scale=0.2, noise_cutoff=0.5, noise_amp=0.05, palette_seed=7)

_KINDS = [ManipulationKind.BLEND, ManipulationKind.SHARPEN, ManipulationKind.NOISE_PATCH,
          ManipulationKind.PATCH_SHUFFLE]


def make_tiny_spec(n_stages: int = 2, train: int = 8, test: int = 8, seed: int = 0) -> ProtocolSpec:
    region = Region(center_y=0.5, center_x=0.5, radius_y=0.35, radius_x=0.35)
    stages = [StageSpec(domain=TINY_DOMAIN,
                        manipulation=ManipulationSpec(kind=_KINDS[t % len(_KINDS)], strength=1.0, region=region,
                                                      seed=t),
                        sizes=StageSizes(train=train, test=test))
              for t in range(n_stages)]
    return ProtocolSpec(name='tiny', stages=stages, global_seed=seed, height=16, width=16)


def make_fixed_detector(weights, bias: float, shape=(1, 1, 2)):
    """Linear detector with a fixed head: logit = w . flatten(x) + bias."""
    m = build_detector('linear', shape, seed=0)
    with torch.no_grad():
        m.head.weight.copy_(torch.tensor([weights], dtype=torch.float32))
        m.head.bias.fill_(bias)
    m.eval()
    return m
