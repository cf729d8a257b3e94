import os

import numpy as np
import pytest

from hdp_lab.synthdata import build_protocol
from hdp_lab.trainer import TrainConfig
from hdp_lab.uap import UAPConfig
from tests.helpers import make_tiny_spec


def pytest_collection_modifyitems(config, items):
    if os.environ.get('HDP_LAB_RUN_SLOW') == '1':
        return
    skip_slow = pytest.mark.skip(reason="set HDP_LAB_RUN_SLOW=1 to run")
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_spec():
    return make_tiny_spec()


@pytest.fixture
def tiny_stages(tiny_spec):
    return build_protocol(tiny_spec)


@pytest.fixture
def fast_cfg() -> TrainConfig:
    return TrainConfig(epochs_per_stage=1, batch_size=8,
                       uap=UAPConfig(alpha=0.01, max_iters=4, gen_subset_size=16, batch_size=8))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
