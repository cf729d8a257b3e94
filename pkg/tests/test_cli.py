import json
import struct

import numpy as np
import pandas as pd
import pytest

from hdp_lab.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from hdp_lab.experiment import MANIFEST_FILE, REPORT_FILE

_FAST = ['--epochs', '1', '--batch-size', '8', '--max-iters', '3', '--alpha', '0.01', '--gen-subset', '8',
         '--uap-batch-size', '8']


@pytest.fixture
def spec_file(tiny_spec, tmp_path):
    path = tmp_path / 'tiny.json'
    path.write_text(tiny_spec.model_dump_json())
    return str(path)


def _stable_report(path):
    """Report bytes with the timestamp line removed."""
    return [line for line in path.read_bytes().splitlines() if not line.lstrip().startswith(b'"timestamp"')]


class TestValidation:

    def test_sigma_out_of_range(self, spec_file, tmp_path, capsys):
        code = main(['run', '--protocol', spec_file, '--sigma', '1.5', '--out', str(tmp_path / 'run')])
        assert code == EXIT_USAGE
        assert 'sigma must be in (0,1]' in capsys.readouterr().err
        assert not (tmp_path / 'run').exists()

    def test_unknown_flag(self):
        assert main(['run', '--no-such-flag']) == EXIT_USAGE

    def test_missing_command(self):
        assert main([]) == EXIT_USAGE

    def test_unknown_protocol(self, tmp_path):
        assert main(['run', '--protocol', str(tmp_path / 'nope.json')]) == EXIT_USAGE

    def test_bad_components(self, spec_file):
        assert main(['run', '--protocol', spec_file, '--components', 'XYZ']) == EXIT_USAGE

    def test_bad_config_value(self, spec_file, tmp_path):
        cfg = tmp_path / 'run.cfg'
        cfg.write_text('epochs=many\n')
        assert main(['run', '--protocol', spec_file, '--config', str(cfg)]) == EXIT_USAGE

    def test_empty_grid(self, spec_file, tmp_path):
        assert main(['sweep', '--protocol', spec_file, '--out', str(tmp_path / 's')]) == EXIT_USAGE

    def test_grid_unknown_key(self, spec_file, tmp_path):
        assert main(['sweep', '--protocol', spec_file, '--grid', 'gamma=1,2', '--out', str(tmp_path)]) == EXIT_USAGE

    def test_report_without_reports(self, tmp_path):
        assert main(['report', '--in', str(tmp_path)]) == EXIT_USAGE

    def test_stage_out_of_range(self, spec_file, tmp_path):
        assert main(['dump-stage', '--protocol', spec_file, '--stage', '3', '--out', str(tmp_path)]) == EXIT_USAGE


class TestRun:

    def test_run_writes_report(self, spec_file, tmp_path, capsys):
        out = tmp_path / 'run'
        code = main(['run', '--protocol', spec_file, '--method', 'sft', '--seed', '0', '--out', str(out), *_FAST])

        assert code == EXIT_OK
        report = json.loads((out / REPORT_FILE).read_text())
        assert len(report['matrix_acc']) == 2
        assert all(len(row) == 2 for row in report['matrix_acc'])
        assert 'AVG_acc=' in capsys.readouterr().out

    def test_run_is_reproducible(self, spec_file, tmp_path):
        for name in ('a', 'b'):
            assert main(['run', '--protocol', spec_file, '--method', 'hdp', '--out', str(tmp_path / name),
                         *_FAST]) == EXIT_OK
        assert _stable_report(tmp_path / 'a' / REPORT_FILE) == _stable_report(tmp_path / 'b' / REPORT_FILE)
        assert json.loads((tmp_path / 'a' / REPORT_FILE).read_text())['per_stage_seconds'] == []
        stage = json.loads((tmp_path / 'a' / 'stages' / 'stage_01.json').read_text())
        assert stage['wall_seconds'] > 0

    def test_config_file_precedence(self, spec_file, tmp_path):
        cfg = tmp_path / 'run.cfg'
        cfg.write_text('# defaults for this test\nmethod=sft\nepochs=1\nbeta=0.5\nbatch-size=8\n')
        out = tmp_path / 'run'

        code = main(['run', '--protocol', spec_file, '--config', str(cfg), '--beta', '0.25', '--out', str(out)])

        assert code == EXIT_OK
        manifest = json.loads((out / MANIFEST_FILE).read_text())
        assert manifest['train_config']['beta'] == 0.25
        assert manifest['train_config']['epochs_per_stage'] == 1
        assert manifest['train_config']['method'] == 'sft'

    def test_seed_overrides_spec_seed(self, spec_file, tmp_path):
        out = tmp_path / 'run'
        assert main(['run', '--protocol', spec_file, '--method', 'sft', '--seed', '5', '--out', str(out),
                     *_FAST]) == EXIT_OK
        manifest = json.loads((out / MANIFEST_FILE).read_text())
        assert manifest['protocol']['global_seed'] == 5
        assert manifest['train_config']['seed'] == 5


class TestSweepAndReport:

    def test_sigma_sweep(self, spec_file, tmp_path):
        out = tmp_path / 'sweep'
        code = main(['sweep', '--protocol', spec_file, '--grid', 'sigma=0.6,0.8,1.0', '--out', str(out), *_FAST])

        assert code == EXIT_OK
        summary = pd.read_csv(out / 'summary.csv')
        assert len(summary) == 3
        assert sorted(p.parent.name for p in out.rglob(REPORT_FILE)) == ['sigma=0.6', 'sigma=0.8', 'sigma=1.0']

    def test_components_none_matches_sft(self, spec_file, tmp_path):
        assert main(['run', '--protocol', spec_file, '--method', 'sft', '--out', str(tmp_path / 'sft'),
                     *_FAST]) == EXIT_OK
        assert main(['sweep', '--protocol', spec_file, '--method', 'hdp', '--grid', 'components=none',
                     '--out', str(tmp_path / 'abl'), *_FAST]) == EXIT_OK

        sft = json.loads((tmp_path / 'sft' / REPORT_FILE).read_text())
        none = json.loads((tmp_path / 'abl' / 'components=none' / REPORT_FILE).read_text())
        assert none['matrix_acc'] == sft['matrix_acc']
        assert none['avg_acc'] == sft['avg_acc']
        assert none['pre_acc'] == sft['pre_acc']

    def test_report_table_and_csv(self, spec_file, tmp_path, capsys):
        for method in ('sft', 'joint'):
            assert main(['run', '--protocol', spec_file, '--method', method, '--out', str(tmp_path / 'runs' / method),
                         *_FAST]) == EXIT_OK
        capsys.readouterr()

        code = main(['report', '--in', str(tmp_path / 'runs'), '--csv', str(tmp_path / 'table.csv')])

        assert code == EXIT_OK
        printed = capsys.readouterr().out
        table = pd.read_csv(tmp_path / 'table.csv')
        assert table['run'].tolist() == ['joint', 'sft']
        assert list(table.columns) == ['run', 'method', 'components', 'sigma', 'beta', 'seed', 'AVG_acc', 'AVG_auc',
                                       'PRE_acc', 'PRE_auc']
        sft = json.loads((tmp_path / 'runs' / 'sft' / REPORT_FILE).read_text())
        assert table.loc[1, 'AVG_acc'] == pytest.approx(round(sft['avg_acc'], 4))
        assert 'AVG_acc' in printed


class TestStageTools:

    def test_dump_stage(self, spec_file, tmp_path):
        assert main(['dump-stage', '--protocol', spec_file, '--stage', '2', '--out', str(tmp_path / 'd')]) == EXIT_OK
        index = json.loads((tmp_path / 'd' / 'index.json').read_text())
        assert len(index) == 32
        assert {e['stage_id'] for e in index} == {2}

    def test_gen_uap(self, spec_file, tmp_path):
        run_dir = tmp_path / 'run'
        assert main(['run', '--protocol', spec_file, '--method', 'sft', '--out', str(run_dir), *_FAST]) == EXIT_OK
        out = tmp_path / 'uap' / 'stage1.hdpu'

        code = main(['gen-uap', '--protocol', spec_file, '--checkpoint', str(run_dir / 'checkpoints' / 'stage_01.hdpm'),
                     '--stage', '1', '--max-iters', '3', '--alpha', '0.01', '--out', str(out)])

        sidecar = json.loads(out.with_suffix('.json').read_text())
        assert code == (EXIT_OK if sidecar['sigma_reached'] else EXIT_RUNTIME)
        assert 0.0 <= sidecar['attack_rate'] <= 1.0

        blob = out.read_bytes()
        magic, version, c, h, w, eps, rate, stage_id, iters = struct.unpack_from('<4sIIIIffII', blob)
        delta = np.frombuffer(blob[36:], dtype='<f4')
        assert (magic, version, (c, h, w), stage_id) == (b'HDPU', 1, (3, 16, 16), 1)
        assert len(delta) == c * h * w
        assert np.max(np.abs(delta)) <= np.float32(0.15)

    def test_gen_uap_missing_checkpoint(self, spec_file, tmp_path):
        code = main(['gen-uap', '--protocol', spec_file, '--checkpoint', str(tmp_path / 'missing.hdpm'),
                     '--stage', '1', '--out', str(tmp_path / 'x.hdpu')])
        assert code == EXIT_RUNTIME
