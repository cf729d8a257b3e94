import math
import struct

import numpy as np
import pytest
import torch

from hdp_lab.detector import (ARCHITECTURES, build_detector, clone_frozen, features, forward_prob, load_checkpoint,
                              logits, predict, save_checkpoint)
from hdp_lab.errors import CorruptFile, ShapeMismatch, VersionMismatch
from tests.helpers import make_fixed_detector

_GRAD_TRIALS = 50


def _random_input(seed: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64).requires_grad_()


@pytest.fixture
def model():
    return build_detector('conv3', (3, 16, 16), seed=3)


@pytest.fixture
def batch(rng):
    return rng.uniform(0, 1, size=(5, 3, 16, 16)).astype(np.float32)


class TestBuildDetector:

    def test_architectures(self):
        assert set(ARCHITECTURES) == {'conv3', 'linear'}
        with pytest.raises(ValueError):
            build_detector('resnet', (3, 16, 16))

    def test_same_seed_same_weights(self):
        a = build_detector('conv3', (3, 16, 16), seed=1)
        b = build_detector('conv3', (3, 16, 16), seed=1)
        c = build_detector('conv3', (3, 16, 16), seed=2)
        assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
        assert not all(torch.equal(p, q) for p, q in zip(a.parameters(), c.parameters()))

    def test_global_rng_untouched(self):
        before = torch.get_rng_state()
        build_detector('conv3', (3, 16, 16), seed=9)
        assert torch.equal(before, torch.get_rng_state())

    def test_feature_dims(self):
        assert build_detector('conv3', (3, 16, 16)).feature_dim == 64
        assert build_detector('linear', (3, 4, 4)).feature_dim == 48


class TestForward:

    def test_probabilities_in_open_interval(self, model, batch):
        p = forward_prob(model, batch)
        assert p.shape == (5,)
        assert torch.all((p > 0) & (p < 1))

    def test_zero_head_gives_one_half(self, model, batch):
        with torch.no_grad():
            model.head.weight.zero_()
            model.head.bias.zero_()
        assert torch.allclose(forward_prob(model, batch), torch.full((5,), 0.5))

    def test_logits_match_probabilities(self, model, batch):
        assert torch.allclose(torch.sigmoid(logits(model, batch)), forward_prob(model, batch))

    @pytest.mark.parametrize("bias,expected", [(math.log(0.7 / 0.3), 1), (0.0, 1), (math.log(0.4999 / 0.5001), 0)])
    def test_predict_threshold(self, bias, expected):
        m = make_fixed_detector([0.0, 0.0], bias)
        assert predict(m, np.zeros((3, 1, 1, 2), dtype=np.float32)).tolist() == [expected] * 3

    def test_predict_dtype(self, model, batch):
        assert predict(model, batch).dtype == torch.int64

    def test_features_deterministic(self, model, batch):
        f1 = features(model, batch)
        f2 = features(model, batch)
        assert f1.shape == (5, model.feature_dim)
        assert torch.equal(f1, f2)

    @pytest.mark.parametrize("shape", [(5, 3, 8, 8), (3, 16, 16), (5, 1, 16, 16)])
    def test_shape_mismatch(self, model, shape):
        with pytest.raises(ShapeMismatch):
            forward_prob(model, np.zeros(shape, dtype=np.float32))

    def test_input_gradient_matches_finite_differences(self):
        m = build_detector('conv3', (3, 8, 8), seed=0).double()
        for seed in range(_GRAD_TRIALS):
            x = _random_input(seed)
            assert torch.autograd.gradcheck(lambda t: forward_prob(m, t).sum(), (x,), eps=1e-6, atol=1e-5, rtol=1e-5)

    def test_feature_gradient_matches_finite_differences(self):
        m = build_detector('conv3', (3, 8, 8), seed=0).double()
        for seed in range(_GRAD_TRIALS):
            x = _random_input(seed)
            assert torch.autograd.gradcheck(lambda t: (features(m, t) ** 2).sum(), (x,), eps=1e-6, atol=1e-5, rtol=1e-5)


class TestCloneFrozen:

    def test_clone_outputs_match(self, model, batch):
        clone = clone_frozen(model)
        model.eval()
        assert torch.equal(forward_prob(model, batch), forward_prob(clone, batch))

    def test_clone_independent_of_original(self, model, batch):
        clone = clone_frozen(model)
        before = forward_prob(clone, batch).clone()

        opt = torch.optim.SGD(model.parameters(), lr=0.5)
        forward_prob(model, batch).sum().backward()
        opt.step()
        with torch.no_grad():
            model.head.bias.add_(1.0)

        assert torch.equal(forward_prob(clone, batch), before)
        assert not any(p.requires_grad for p in clone.parameters())
        assert not clone.training


class TestCheckpoint:

    def test_round_trip(self, model, batch, tmp_path):
        model.stage = 3
        ckpt = save_checkpoint(model, tmp_path / 'ckpt' / 'stage_03.hdpm')

        loaded = load_checkpoint(ckpt.path)

        assert ckpt.arch == 'conv3' and ckpt.stage == 3 and ckpt.input_shape == (3, 16, 16)
        assert loaded.stage == 3
        for (n1, p1), (n2, p2) in zip(model.state_dict().items(), loaded.state_dict().items()):
            assert n1 == n2
            assert torch.equal(p1, p2)
        model.eval()
        loaded.eval()
        assert torch.equal(forward_prob(model, batch), forward_prob(loaded, batch))

    def test_bad_magic(self, model, tmp_path):
        ckpt = save_checkpoint(model, tmp_path / 'm.hdpm')
        blob = ckpt.path.read_bytes()
        ckpt.path.write_bytes(b'NOPE' + blob[4:])
        with pytest.raises(CorruptFile):
            load_checkpoint(ckpt.path)

    def test_unknown_version(self, model, tmp_path):
        ckpt = save_checkpoint(model, tmp_path / 'm.hdpm')
        blob = bytearray(ckpt.path.read_bytes())
        struct.pack_into('<I', blob, 4, 2)
        ckpt.path.write_bytes(bytes(blob))
        with pytest.raises(VersionMismatch):
            load_checkpoint(ckpt.path)

    @pytest.mark.parametrize("cut", [2, 4, 5])
    def test_truncated(self, model, tmp_path, cut):
        ckpt = save_checkpoint(model, tmp_path / 'm.hdpm')
        ckpt.path.write_bytes(ckpt.path.read_bytes()[:-cut])
        with pytest.raises(CorruptFile):
            load_checkpoint(ckpt.path)

    def test_short_file(self, tmp_path):
        path = tmp_path / 'm.hdpm'
        path.write_bytes(b'HDPM')
        with pytest.raises(CorruptFile):
            load_checkpoint(path)
