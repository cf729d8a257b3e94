import json

import numpy as np
import pytest
import torch
from pydantic import ValidationError

from hdp_lab.detector import build_detector, clone_frozen
from hdp_lab.errors import EmptyPool, EmptyStage, KTooLarge
from hdp_lab.evaluation import MatrixRecorder
from hdp_lab.losses import bce, feat_mse, pseudo_entropy
from hdp_lab.synthdata import StageDataset
from hdp_lab.trainer import (Method, ReplayBuffer, TrainConfig, hdp_batch_loss, joint_training_set, run_protocol,
                             run_protocol_hdp, run_protocol_joint, run_protocol_sft, select_buffer,
                             train_stage_base, train_stage_hdp)
from hdp_lab.uap import Perturbation, UAPPool, pool_append


def _params_equal(a, b):
    return all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def _pool(*values, shape=(3, 16, 16)):
    pool = UAPPool()
    for t, v in enumerate(values, start=1):
        pool_append(pool, Perturbation(delta=np.full(shape, v, dtype=np.float32), epsilon=0.15, stage_id=t))
    return pool


@pytest.fixture
def batch(tiny_stages):
    x, y = tiny_stages[1].arrays('train')
    return torch.from_numpy(x[::2].copy()), torch.from_numpy(y[::2].copy())


class TestTrainConfig:

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lr, cfg.weight_decay, cfg.batch_size, cfg.epochs_per_stage) == (1e-3, 1e-5, 64, 10)
        assert cfg.beta == 1.0
        assert cfg.method == Method.HDP
        assert cfg.components == 'EPR'

    def test_components(self):
        assert TrainConfig(use_distill_real=False).components == 'EP'
        assert TrainConfig(use_entropy=False, use_distill_pseudo=False, use_distill_real=False).components == 'none'

    @pytest.mark.parametrize("field,value", [('lr', 0), ('batch_size', 0), ('epochs_per_stage', 0), ('beta', -1)])
    def test_validation(self, field, value):
        with pytest.raises(ValidationError):
            TrainConfig(**{field: value})


class TestBuffer:

    def test_select_zero(self, tiny_stages):
        assert select_buffer(tiny_stages[0], 0, seed=0) == []

    def test_balanced_and_deterministic(self, tiny_stages):
        a = select_buffer(tiny_stages[0], 7, seed=1)
        b = select_buffer(tiny_stages[0], 7, seed=1)
        assert [s.label for s in a].count(0) == 4
        assert [s.label for s in a].count(1) == 3
        assert [s.seed for s in a] == [s.seed for s in b]
        assert len({(s.label, s.index) for s in a}) == 7

    def test_too_large(self, tiny_stages):
        with pytest.raises(KTooLarge):
            select_buffer(tiny_stages[0], 17, seed=0)

    def test_replay_buffer_capacity(self, tiny_stages):
        buffer = ReplayBuffer(capacity=2)
        buffer.add(1, tiny_stages[0].train_real[:2])
        assert len(buffer) == 2
        with pytest.raises(KTooLarge):
            buffer.add(2, tiny_stages[1].train_real[:3])


class TestHdpBatchLoss:

    def test_identical_teacher_gives_zero_distillation(self, batch):
        m = build_detector('conv3', (3, 16, 16), seed=0)
        m.eval()
        out = hdp_batch_loss(m, clone_frozen(m), *batch, _pool(0.1), 0, TrainConfig())
        assert float(out.distill_real) == 0.0
        assert float(out.distill_pseudo) == 0.0
        assert float(out.pseudo_entropy) > 0.0

    def test_recomposes_from_intermediates(self, batch):
        m = build_detector('conv3', (3, 16, 16), seed=0)
        teacher = clone_frozen(build_detector('conv3', (3, 16, 16), seed=1))
        cfg = TrainConfig(beta=0.7)
        inter = {}

        out = hdp_batch_loss(m, teacher, *batch, _pool(0.1, -0.05), 3, cfg, intermediates=inter)

        recomposed = (float(bce(inter['probs'], inter['labels']))
                      + float(pseudo_entropy(inter['pseudo_probs']))
                      + cfg.beta * (float(feat_mse(inter['real_feats'], inter['teacher_real_feats']))
                                    + float(feat_mse(inter['pseudo_feats'], inter['teacher_pseudo_feats']))))
        assert float(out.total) == pytest.approx(recomposed, rel=1e-6)
        assert inter['pool_index'] == 1

    def test_single_entry_pool_always_index_zero(self, batch):
        m = build_detector('conv3', (3, 16, 16), seed=0)
        for i in range(5):
            inter = {}
            hdp_batch_loss(m, clone_frozen(m), *batch, _pool(0.1), i, TrainConfig(), intermediates=inter)
            assert inter['pool_index'] == 0

    def test_pseudo_built_from_real_half(self, batch):
        m = build_detector('conv3', (3, 16, 16), seed=0)
        x, y = batch
        inter = {}
        hdp_batch_loss(m, clone_frozen(m), x, y, _pool(0.1), 0, TrainConfig(), intermediates=inter)
        assert len(inter['pseudo']) == int((y == 0).sum())
        assert np.allclose(inter['pseudo'], x[y == 0].numpy() + np.float32(0.1))

    def test_buffered_samples_only_enter_cross_entropy(self, batch):
        m = build_detector('conv3', (3, 16, 16), seed=0)
        x, y = batch
        current = torch.zeros(len(y), dtype=torch.bool)
        out = hdp_batch_loss(m, clone_frozen(build_detector('conv3', (3, 16, 16), seed=1)), x, y, _pool(0.1), 0,
                             TrainConfig(), current=current)
        assert out.pseudo_entropy == 0.0
        assert out.distill_real == 0.0
        assert out.distill_pseudo == 0.0
        assert float(out.total) == pytest.approx(float(out.ce))

    def test_empty_pool(self, batch):
        m = build_detector('conv3', (3, 16, 16), seed=0)
        with pytest.raises(EmptyPool):
            hdp_batch_loss(m, clone_frozen(m), *batch, UAPPool(), 0, TrainConfig())

    def test_real_only_distillation_needs_no_pool(self, batch):
        m = build_detector('conv3', (3, 16, 16), seed=0)
        cfg = TrainConfig(use_entropy=False, use_distill_pseudo=False)
        out = hdp_batch_loss(m, clone_frozen(build_detector('conv3', (3, 16, 16), seed=2)), *batch, UAPPool(), 0,
                             cfg)
        assert float(out.distill_real) > 0


class TestStageTraining:

    def test_base_is_deterministic(self, tiny_stages, fast_cfg):
        a = train_stage_base(build_detector('conv3', (3, 16, 16), seed=0), tiny_stages[0], fast_cfg)
        b = train_stage_base(build_detector('conv3', (3, 16, 16), seed=0), tiny_stages[0], fast_cfg)
        assert _params_equal(a, b)

    def test_base_changes_parameters(self, tiny_stages, fast_cfg):
        m = build_detector('conv3', (3, 16, 16), seed=0)
        before = clone_frozen(m)
        train_stage_base(m, tiny_stages[0], fast_cfg)
        assert not _params_equal(m, before)

    def test_empty_stage(self, fast_cfg):
        with pytest.raises(EmptyStage):
            train_stage_base(build_detector('conv3', (3, 16, 16)), StageDataset(stage_id=1), fast_cfg)

    def test_hdp_teacher_unchanged(self, tiny_stages, fast_cfg):
        m = build_detector('conv3', (3, 16, 16), seed=0)
        train_stage_base(m, tiny_stages[0], fast_cfg)
        teacher = clone_frozen(m)
        snapshot = [p.clone() for p in teacher.parameters()]

        train_stage_hdp(m, teacher, tiny_stages[1], _pool(0.05), fast_cfg)

        assert all(torch.equal(a, b) for a, b in zip(snapshot, teacher.parameters()))
        assert not _params_equal(m, teacher)

    def test_hdp_needs_pool(self, tiny_stages, fast_cfg):
        m = build_detector('conv3', (3, 16, 16), seed=0)
        with pytest.raises(EmptyPool):
            train_stage_hdp(m, clone_frozen(m), tiny_stages[1], UAPPool(), fast_cfg)

    def test_logged_total_matches_components(self, tiny_stages, fast_cfg):
        m = build_detector('conv3', (3, 16, 16), seed=0)
        records = []
        train_stage_hdp(m, clone_frozen(build_detector('conv3', (3, 16, 16), seed=5)), tiny_stages[1],
                        _pool(0.05), fast_cfg, on_batch=lambda i, e, b: records.append(b))
        assert len(records) == 2
        for b in records:
            expected = b.ce + b.pseudo_entropy + fast_cfg.beta * (b.distill_real + b.distill_pseudo)
            assert b.total == pytest.approx(expected, rel=1e-6)


class TestProtocols:

    def test_hdp_pool_grows_one_per_stage(self, tiny_stages, fast_cfg, tmp_path):
        _, pool, results = run_protocol_hdp(tiny_stages, fast_cfg, out_dir=tmp_path)

        assert len(pool) == 2
        assert pool.stage_ids == [1, 2]
        assert [r.stage_id for r in results] == [1, 2]
        assert sorted(p.name for p in (tmp_path / 'checkpoints').iterdir()) == ['stage_01.hdpm', 'stage_02.hdpm']
        manifest = json.loads((tmp_path / 'uap_pool' / 'manifest.json').read_text())
        assert [e['stage_id'] for e in manifest] == [1, 2]
        stage_json = json.loads((tmp_path / 'stages' / 'stage_02.json').read_text())
        assert stage_json['uap_path'].endswith('uap_stage_002.hdpu')
        assert all(np.max(np.abs(p.delta)) <= fast_cfg.uap.epsilon for p in pool.perturbations)

    def test_hdp_same_seed_same_matrix(self, tiny_stages, fast_cfg):
        rec_a, rec_b = MatrixRecorder(tiny_stages), MatrixRecorder(tiny_stages)
        run_protocol_hdp(tiny_stages, fast_cfg, on_stage_end=rec_a)
        run_protocol_hdp(tiny_stages, fast_cfg, on_stage_end=rec_b)
        assert rec_a.acc.to_rows() == rec_b.acc.to_rows()
        assert rec_a.auc.to_rows() == rec_b.auc.to_rows()

    def test_reduces_to_sft(self, tiny_stages, fast_cfg):
        cfg = fast_cfg.model_copy(update={'beta': 0.0, 'use_entropy': False, 'use_distill_pseudo': False,
                                          'use_distill_real': False})
        hdp_losses, sft_losses = [], []

        m_hdp, _, _ = run_protocol_hdp(tiny_stages, cfg, on_batch=lambda i, e, b: hdp_losses.append(b.total))
        m_sft, _ = run_protocol_sft(tiny_stages, cfg, on_batch=lambda i, e, b: sft_losses.append(b.ce))

        assert len(hdp_losses) == len(sft_losses) == 4
        assert np.max(np.abs(np.array(hdp_losses) - np.array(sft_losses))) <= 1e-12
        assert _params_equal(m_hdp, m_sft)

    def test_sft_deterministic(self, tiny_stages, fast_cfg):
        m1, r1 = run_protocol_sft(tiny_stages, fast_cfg)
        m2, r2 = run_protocol_sft(tiny_stages, fast_cfg)
        assert _params_equal(m1, m2)
        assert [r.losses for r in r1] == [r.losses for r in r2]

    def test_buffer_enlarges_training_set(self, tiny_stages, fast_cfg):
        cfg = fast_cfg.model_copy(update={'buffer_per_stage': 4})
        _, results = run_protocol_sft(tiny_stages, cfg)
        assert [r.batches for r in results] == [2, 3]

    def test_joint_union(self, tiny_stages, fast_cfg):
        x, y, origin = joint_training_set(tiny_stages)
        assert len(x) == sum(len(s.samples('train')) for s in tiny_stages)
        assert sorted(set(origin.tolist())) == [1, 2]

        m, results = run_protocol_joint(tiny_stages, fast_cfg)
        assert len(results) == 1
        assert results[0].stage_id == 2
        assert results[0].batches == 4

    def test_dispatch(self, tiny_stages, fast_cfg):
        _, pool, results = run_protocol(tiny_stages, fast_cfg.model_copy(update={'method': Method.SFT}))
        assert pool is None
        assert len(results) == 2

    def test_needs_two_stages(self, tiny_stages, fast_cfg):
        with pytest.raises(ValueError):
            run_protocol_sft(tiny_stages[:1], fast_cfg)


@pytest.mark.slow
class TestCalibration:

    def test_final_epoch_loss_not_above_first(self):
        from hdp_lab.synthdata import build_stage, preset_protocol

        spec = preset_protocol('p1', train_size=200, test_size=50)
        stage = build_stage(spec.stages[0], stage_id=1, image_shape=spec.image_shape)
        records = {}
        train_stage_base(build_detector('conv3', spec.image_shape, seed=0), stage,
                         TrainConfig(epochs_per_stage=5),
                         on_batch=lambda i, e, b: records.setdefault(e, []).append(b.total))
        assert np.mean(records[4]) <= np.mean(records[0])

    @pytest.mark.parametrize("preset", ['p1', 'p2', 'p3'])
    @pytest.mark.parametrize("seed", [0, 1])
    def test_every_preset_stage_learnable_alone(self, preset, seed):
        from hdp_lab.evaluation import evaluate_model, score_stage
        from hdp_lab.synthdata import build_protocol, preset_protocol

        spec = preset_protocol(preset, global_seed=seed)
        cfg = TrainConfig(seed=seed)
        for stage in build_protocol(spec):
            m = train_stage_base(build_detector(cfg.arch, spec.image_shape, seed=seed), stage, cfg)
            acc, _ = evaluate_model(m, stage)
            scores, labels = score_stage(m, stage)
            false_alarms = np.mean(scores[labels == 0] >= 0.5)

            assert acc >= 90.0, f"{preset} stage {stage.stage_id}: ACC {acc:.2f}"
            assert false_alarms < 0.5, f"{preset} stage {stage.stage_id}: {false_alarms:.0%} of reals flagged"
