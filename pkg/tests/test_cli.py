import json
import os

import pytest

from cli import build_parser, main
from conftest import SMOKE_CONFIG


def _cli(workdir, *args):
    return main([*args, '--config', SMOKE_CONFIG, '--workdir', workdir])


@pytest.fixture(scope='module')
def trained_workdir(tmp_path_factory):
    """Smoke run through every stage up to the fine proxies."""
    workdir = str(tmp_path_factory.mktemp('cli') / 'run')
    for command in (['gen-data'], ['train-stage1'], ['partition-layers'], ['train-stage2'],
                    ['train-ranker', '--variant', 'base'], ['train-ranker', '--variant', 'v3']):
        assert _cli(workdir, *command) == 0, command
    return workdir


def test_every_subcommand_is_registered():
    parser = build_parser()
    for command in ('gen-data', 'train-stage1', 'partition-layers', 'train-stage2', 'ablation',
                    'gen-proxies', 'viz', 'gradcheck'):
        args = parser.parse_args([command])
        assert args.workdir == './idproxy_run'
    assert parser.parse_args(['eval', '--variant', 'v5']).split == 'all'


def test_stage2_before_stage1_is_a_dependency_error(tmp_path, capsys):
    workdir = str(tmp_path / 'run')
    assert _cli(workdir, 'gen-data') == 0
    capsys.readouterr()
    assert _cli(workdir, 'train-stage2') == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    assert err[0].startswith('error: DependencyError: ')
    assert 'train-stage1' in err[0]


def test_bad_config_exits_with_a_configuration_error(tmp_path, capsys):
    path = tmp_path / 'bad.yaml'
    path.write_text('generation:\n  cold_fraction: 0\n', encoding='utf-8')
    code = main(['gen-data', '--config', str(path), '--workdir', str(tmp_path / 'run')])
    assert code == 2
    assert capsys.readouterr().err.startswith('error: ConfigurationError: cold_fraction')


def test_eval_prints_one_line_per_split(trained_workdir, capsys):
    capsys.readouterr()
    assert _cli(trained_workdir, 'eval', '--variant', 'v5') == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert [line.split()[0] for line in lines] == ['auc[warm]', 'auc[cold]', 'auc[global]']
    assert _cli(trained_workdir, 'eval', '--variant', 'v3', '--split', 'cold') == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith('auc[cold] v3_coarse: ')
    assert 0.0 <= float(line.split(': ')[1]) <= 1.0


def test_eval_writes_scores_and_a_run_manifest(trained_workdir):
    assert _cli(trained_workdir, 'eval', '--variant', 'base') == 0
    with open(os.path.join(trained_workdir, 'ranker', 'base', 'scores.jsonl'), encoding='utf-8') as f:
        first = json.loads(f.readline())
    assert set(first) == {'user_id', 'item_id', 'split', 'y_hat', 'y'}
    with open(os.path.join(trained_workdir, 'manifests', 'eval.json'), encoding='utf-8') as f:
        manifest = json.load(f)
    assert manifest['status'] == 'SUCCESS'
    assert 'auc_cold' in manifest['metrics']


def test_serving_path_scores_from_the_store(trained_workdir, capsys):
    capsys.readouterr()
    assert _cli(trained_workdir, 'eval', '--variant', 'v5', '--split', 'cold', '--serve') == 0
    assert capsys.readouterr().out.startswith('auc[cold] v5_structure_reuse: ')
    assert _cli(trained_workdir, 'eval', '--variant', 'base', '--serve') == 1
    assert capsys.readouterr().err.startswith('error: PreconditionError: ')


def test_gen_proxies_rewrites_unless_appending(trained_workdir, capsys):
    capsys.readouterr()
    assert _cli(trained_workdir, 'gen-proxies') == 0
    first = capsys.readouterr().out
    assert _cli(trained_workdir, 'gen-proxies') == 0
    assert capsys.readouterr().out == first
    assert 'version 1' in first
    assert _cli(trained_workdir, 'gen-proxies', '--append') == 0
    assert 'version 2' in capsys.readouterr().out


def test_viz_writes_a_projection(trained_workdir, capsys):
    capsys.readouterr()
    assert _cli(trained_workdir, 'viz', '--table', 'coarse') == 0
    out = capsys.readouterr().out
    assert 'silhouette[coarse]' in out
    with open(os.path.join(trained_workdir, 'viz', 'projection_coarse.csv'), encoding='utf-8') as f:
        assert f.readline().strip() == 'item_id,x,y,topic_id'


def test_viz_reads_the_fine_proxy_store(trained_workdir, capsys):
    capsys.readouterr()
    assert _cli(trained_workdir, 'viz', '--table', 'fine') == 0
    assert 'silhouette[fine]' in capsys.readouterr().out
    with open(os.path.join(trained_workdir, 'viz', 'projection_fine.csv'), encoding='utf-8') as f:
        rows = f.read().strip().splitlines()
    assert rows[0] == 'item_id,x,y,topic_id'
    ids = [int(row.split(',')[0]) for row in rows[1:]]
    assert ids == sorted(ids)


def test_gradcheck_passes(tmp_path, capsys):
    assert main(['gradcheck', '--points', '2', '--workdir', str(tmp_path / 'run')]) == 0
    out = capsys.readouterr().out
    assert 'FAIL' not in out
    assert 'ranker_v5: ' in out
