import json
import os

import pytest

from errors import DependencyError
from log_manager import LogManager


@pytest.fixture
def log_manager(tmp_path):
    manager = LogManager()
    previous = manager.log_dir
    manager.configure(str(tmp_path / 'logs'))
    yield manager
    manager.set_run_id(None)
    manager.configure(previous)


def test_log_manager_is_a_singleton():
    assert LogManager() is LogManager()


def test_entries_are_json_lines_stamped_with_the_run(log_manager):
    log_manager.set_run_id('run_a')
    log_manager.log_epoch('stage1', 1, 0.5)
    log_manager.log_evaluation('auc[cold] base: 0.6000', {'auc': 0.6})
    log_manager.set_run_id('run_b')
    log_manager.log_info('other run')
    entries = log_manager.get_logs_by_run('run_a')
    assert [e.category for e in entries] == ['TRAINING', 'EVALUATION']
    assert entries[0].details == {'stage': 'stage1', 'epoch': 1, 'loss': 0.5}
    with open(os.path.join(log_manager.log_dir, 'operations.jsonl'), encoding='utf-8') as f:
        assert len([json.loads(line) for line in f]) == 3


def test_recent_logs_filter_by_category(log_manager):
    log_manager.log_artifact('create', 'corpus', True)
    log_manager.log_error(DependencyError('adaptor', 'train-stage2'), 'gen-proxies')
    errors = log_manager.get_recent_logs(category='ERROR')
    assert len(errors) == 1
    assert errors[0].details['error_type'] == 'DependencyError'
    recent = log_manager.get_recent_logs(count=1)
    assert recent[0].category == 'ERROR'
