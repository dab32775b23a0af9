import json
import os

import pytest

from errors import ArtifactMismatchError
from experiment_runner import CellResult, ExperimentReport, run_ablation

SPLIT_AUC = {
    'base': (0.70, 0.55, 0.66),
    'v1_content_feature': (0.70, 0.58, 0.67),
    'v3_coarse': (0.71, 0.61, 0.68),
    'v4_concat_fine': (0.71, 0.62, 0.69),
    'v5_structure_reuse': (0.72, 0.65, 0.70),
}


def _report(seeds=(0, 1, 2), shift=0.0, config_hash='c' * 64):
    report = ExperimentReport(config_hash=config_hash, variants=list(SPLIT_AUC))
    for seed in seeds:
        for variant, (warm, cold, glob) in SPLIT_AUC.items():
            jitter = shift + 0.001 * seed
            report.cells[(variant, seed)] = CellResult(
                variant, seed, auc={'warm': warm + jitter, 'cold': cold + jitter, 'global': glob + jitter})
        for day in range(2):
            report.daily[(seed, day)] = {'global_delta': 0.02, 'cold_delta': 0.08 + 0.01 * day}
    return report


def test_base_delta_is_exactly_zero():
    deltas = _report().delta()
    for seed in range(3):
        assert deltas[('base', seed)] == {'warm': 0.0, 'cold': 0.0, 'global': 0.0}
    assert deltas[('v5_structure_reuse', 0)]['cold'] == pytest.approx(0.10)


def test_medians_and_flags_follow_the_ladder():
    report = _report()
    medians = report.medians()
    assert medians['v3_coarse']['auc']['cold'] == pytest.approx(0.611)
    assert medians['v5_structure_reuse']['n_ok'] == 3
    assert report.flags() == {
        'ladder_ordered_cold': True,
        'v5_cold_gain_exceeds_warm': True,
        'v5_cold_gain_exceeds_global': True,
        'v5_cold_gain_exceeds_global_every_day': True,
    }


def test_out_of_order_ladder_is_flagged():
    report = _report()
    report.cells[('v4_concat_fine', 1)].auc['cold'] = 0.5
    report.cells[('v4_concat_fine', 2)].auc['cold'] = 0.5
    assert report.flags()['ladder_ordered_cold'] is False


def test_failed_cells_are_counted_and_skipped():
    report = _report()
    report.cells[('v3_coarse', 1)] = CellResult('v3_coarse', 1, status='failed',
                                                error='error: ProxyNotFoundError: no proxy for item 3')
    medians = report.medians()['v3_coarse']
    assert (medians['n_ok'], medians['n_failed']) == (2, 1)
    assert ('v3_coarse', 1) not in report.delta()
    assert 'ProxyNotFoundError' in report.to_markdown()


def test_merge_is_associative_and_right_biased():
    a, b, c = _report(seeds=(0,)), _report(seeds=(1,)), _report(seeds=(0, 2), shift=0.01)
    left = a.merge(b).merge(c)
    right = a.merge(b.merge(c))
    assert left.to_json() == right.to_json()
    assert left.seeds == [0, 1, 2]
    assert left.cells[('base', 0)].auc['warm'] == pytest.approx(0.71)


def test_reports_of_different_configs_do_not_merge():
    with pytest.raises(ArtifactMismatchError):
        _report().merge(_report(config_hash='d' * 64))


def test_json_round_trip_is_stable():
    report = _report()
    text = report.to_json()
    assert text.endswith('\n')
    assert ExperimentReport.from_json(text).to_json() == text
    data = json.loads(text)
    assert set(data) >= {'cells', 'summary', 'flags', 'daily_summary'}
    assert 'runtime_seconds' not in text


def test_markdown_lists_every_variant():
    markdown = _report().to_markdown()
    for variant in SPLIT_AUC:
        assert f"| {variant} |" in markdown
    assert '- ladder_ordered_cold: true' in markdown


def test_missing_full_model_leaves_its_flags_undecided():
    report = ExperimentReport(config_hash='c' * 64, variants=['base', 'v3_coarse'])
    report.cells[('base', 0)] = CellResult('base', 0, auc={'warm': 0.7, 'cold': 0.6, 'global': 0.65})
    report.cells[('v3_coarse', 0)] = CellResult('v3_coarse', 0, auc={'warm': 0.7, 'cold': 0.62, 'global': 0.66})
    flags = report.flags()
    assert flags['ladder_ordered_cold'] is True
    assert flags['v5_cold_gain_exceeds_warm'] is None
    assert flags['v5_cold_gain_exceeds_global_every_day'] is None


@pytest.mark.slow
def test_smoke_ablation_writes_both_reports(smoke_config, workdir):
    report = run_ablation(smoke_config, workdir, seeds=1, variants=['v3', 'v5'])
    assert report.variants == ['base', 'v3_coarse', 'v5_structure_reuse']
    assert all(cell.status == 'ok' for cell in report.cells.values()), report.to_markdown()
    with open(os.path.join(workdir, 'ablation', 'report.json'), encoding='utf-8') as f:
        assert f.read() == report.to_json()
    assert os.path.exists(os.path.join(workdir, 'ablation', 'report.md'))
