import math
import warnings

import numpy as np
import pytest
import torch

from hdp_lab.errors import EmptyBatch, LengthMismatch, NonFinite, ShapeMismatch
from hdp_lab.losses import LossBreakdown, bce, feat_mse, pseudo_entropy, total_loss

_GRAD_TRIALS = 50


def _bce_oracle(probs, labels):
    total = 0.0
    for p, y in zip(probs, labels):
        total += -(y * math.log(p) + (1 - y) * math.log(1 - p))
    return total / len(probs)


class TestBce:

    def test_coin_flip(self):
        assert float(bce([0.5, 0.5], [1, 0])) == pytest.approx(0.693147, abs=1e-6)

    def test_confident_fake(self):
        assert float(bce([1 - 1e-7], [1])) == pytest.approx(1e-7, abs=1e-9)

    def test_matches_scalar_oracle(self):
        probs, labels = [0.9, 0.2, 0.6], [1, 0, 1]
        assert abs(float(bce(probs, labels)) - _bce_oracle(probs, labels)) < 1e-12

    def test_finite_on_exact_zero_and_one(self):
        value = bce([0.0, 1.0, 0.0, 1.0], [1, 0, 0, 1])
        assert torch.isfinite(value)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            bce([0.5, 0.5], [1])

    def test_empty_batch(self):
        with pytest.raises(EmptyBatch):
            bce([], [])

    def test_gradient(self):
        for seed in range(_GRAD_TRIALS):
            g = torch.Generator().manual_seed(seed)
            p = (0.05 + 0.9 * torch.rand(8, generator=g, dtype=torch.float64)).requires_grad_()
            y = torch.randint(0, 2, (8,), generator=g).to(torch.float64)
            assert torch.autograd.gradcheck(lambda t: bce(t, y), (p,), eps=1e-7, atol=1e-6, rtol=1e-5)


class TestPseudoEntropy:

    def test_example(self):
        assert float(pseudo_entropy([0.5, 0.25])) == pytest.approx(1.039721, abs=1e-6)

    def test_confident_fake(self):
        assert float(pseudo_entropy([1 - 1e-7])) == pytest.approx(0.0, abs=1e-6)

    def test_equals_bce_against_fake_label(self, rng):
        for _ in range(100):
            p = torch.as_tensor(rng.uniform(0, 1, size=rng.integers(1, 64)), dtype=torch.float64)
            assert torch.equal(pseudo_entropy(p), bce(p, torch.ones_like(p)))

    def test_finite_on_zero(self):
        assert torch.isfinite(pseudo_entropy([0.0, 1.0]))

    def test_empty_batch(self):
        with pytest.raises(EmptyBatch):
            pseudo_entropy([])

    def test_gradient(self):
        for seed in range(_GRAD_TRIALS):
            g = torch.Generator().manual_seed(seed)
            p = (0.05 + 0.9 * torch.rand(8, generator=g, dtype=torch.float64)).requires_grad_()
            assert torch.autograd.gradcheck(pseudo_entropy, (p,), eps=1e-7, atol=1e-6, rtol=1e-5)


class TestFeatMse:

    def test_identical(self, rng):
        a = rng.normal(size=(4, 8))
        assert float(feat_mse(a, a)) == 0.0

    def test_single_pair(self):
        assert float(feat_mse([[1.0, 2.0]], [[0.0, 0.0]])) == 5.0

    def test_matches_loop_oracle(self, rng):
        a = rng.normal(size=(7, 5))
        b = rng.normal(size=(7, 5))
        expected = sum(sum((a[i, k] - b[i, k]) ** 2 for k in range(5)) for i in range(7)) / 7
        assert abs(float(feat_mse(a, b)) - expected) < 1e-12

    def test_symmetric_and_non_negative(self, rng):
        a = rng.normal(size=(6, 3))
        b = rng.normal(size=(6, 3))
        assert float(feat_mse(a, b)) == float(feat_mse(b, a))
        assert float(feat_mse(a, b)) > 0

    def test_mse_mode_divides_by_dimension(self, rng):
        a = rng.normal(size=(6, 4))
        b = rng.normal(size=(6, 4))
        assert float(feat_mse(a, b, 'mse')) == pytest.approx(float(feat_mse(a, b)) / 4, rel=1e-12)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            feat_mse([[1.0]], [[0.0]], 'l1')

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            feat_mse(np.zeros((2, 3)), np.zeros((2, 4)))

    def test_empty_batch(self):
        with pytest.raises(EmptyBatch):
            feat_mse(np.zeros((0, 3)), np.zeros((0, 3)))

    @pytest.mark.parametrize("mode", ['sq_l2', 'mse'])
    def test_gradient(self, mode):
        for seed in range(_GRAD_TRIALS):
            g = torch.Generator().manual_seed(seed)
            a = torch.randn(3, 4, generator=g, dtype=torch.float64).requires_grad_()
            b = torch.randn(3, 4, generator=g, dtype=torch.float64)
            assert torch.autograd.gradcheck(lambda t: feat_mse(t, b, mode), (a,), eps=1e-7, atol=1e-6, rtol=1e-5)


class TestTotalLoss:

    def test_example(self):
        out = total_loss(1.0, 0.5, 0.2, 0.3, beta=2)
        assert out.total == pytest.approx(2.5, abs=1e-12)
        assert out.beta == 2

    def test_zero_beta(self):
        out = total_loss(1.0, 0.5, 0.2, 0.3, beta=0)
        assert out.total == pytest.approx(1.5, abs=1e-12)

    def test_stage_one_reduction(self):
        assert total_loss(0.8, 0.0, 0.0, 0.0, beta=1.0).total == 0.8

    def test_tensor_components_keep_gradient(self):
        ce = torch.tensor(1.0, requires_grad=True)
        out = total_loss(ce, torch.tensor(0.5), torch.tensor(0.1), torch.tensor(0.2), beta=1.0)
        out.total.backward()
        assert ce.grad == 1.0
        assert isinstance(out.item().total, float)

    def test_item_on_graph_tensors_is_silent(self):
        ce = torch.tensor(0.7, requires_grad=True)
        out = total_loss(ce * 2, ce * 0.5, torch.tensor(0.1), ce ** 2, beta=1.0)
        with warnings.catch_warnings():
            warnings.simplefilter('error')
            record = out.item()
            d = out.to_dict()
        assert record.total == pytest.approx(1.4 + 0.35 + 0.1 + 0.49, rel=1e-6)
        assert d['distill_pseudo'] == pytest.approx(0.49, rel=1e-6)
        assert out.total.requires_grad

    def test_to_dict(self):
        d = total_loss(1.0, 0.5, 0.2, 0.3, beta=2).to_dict()
        assert set(d) == {'ce', 'pseudo_entropy', 'distill_real', 'distill_pseudo', 'total'}

    @pytest.mark.parametrize("bad", [float('nan'), float('inf')])
    def test_non_finite(self, bad):
        with pytest.raises(NonFinite):
            total_loss(1.0, bad, 0.0, 0.0, beta=1.0)

    def test_negative_beta(self):
        with pytest.raises(ValueError):
            total_loss(1.0, 0.0, 0.0, 0.0, beta=-0.1)

    def test_breakdown_is_frozen(self):
        out = LossBreakdown(ce=1.0, pseudo_entropy=0.0, distill_real=0.0, distill_pseudo=0.0, total=1.0)
        with pytest.raises(AttributeError):
            out.total = 2.0
