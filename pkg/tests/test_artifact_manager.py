import os

import numpy as np
import pytest

from artifact_manager import ArtifactManager, load_tensors, save_tensors, tensor_hash
from errors import ArtifactMismatchError, DependencyError, PreconditionError
from run_tracker import RunTracker


@pytest.fixture
def manager(workdir):
    return ArtifactManager(workdir)


def test_checkpoints_keep_names_shapes_and_integer_ids(tmp_path, rng):
    path = str(tmp_path / 'a.ckpt')
    tensors = {'W': rng.standard_normal((3, 2)), 'ids': np.arange(4)}
    save_tensors(path, tensors, 'h' * 64, {'layers': [1, 2, 3]})
    loaded, config_hash, meta = load_tensors(path)
    np.testing.assert_array_equal(loaded['W'], tensors['W'])
    assert loaded['ids'].dtype.kind == 'i'
    assert config_hash == 'h' * 64
    assert meta == {'layers': [1, 2, 3]}


def test_identical_tensors_give_identical_bytes(tmp_path, rng):
    tensors = {'b': rng.standard_normal(5), 'a': rng.standard_normal((2, 2))}
    first = save_tensors(str(tmp_path / 'x.ckpt'), tensors)
    second = save_tensors(str(tmp_path / 'y.ckpt'), dict(reversed(list(tensors.items()))))
    assert first == second
    assert tensor_hash(tensors) == tensor_hash({k: v.copy() for k, v in tensors.items()})


def test_truncated_checkpoint_is_refused(tmp_path, rng):
    path = str(tmp_path / 'a.ckpt')
    save_tensors(path, {'W': rng.standard_normal(8)})
    with open(path, 'r+b') as f:
        f.truncate(os.path.getsize(path) - 8)
    with pytest.raises(PreconditionError):
        load_tensors(path)


def test_missing_upstream_names_its_producer(manager):
    with pytest.raises(DependencyError) as info:
        manager.require('pooled_cache')
    assert info.value.producer == 'partition-layers'
    with pytest.raises(DependencyError) as info:
        manager.load_tensors('ranker/v3_coarse')
    assert info.value.producer == 'train-ranker --variant v3_coarse'


def test_registry_survives_a_restart_and_detects_edits(manager, workdir, rng):
    manager.save_tensors('adaptor', {'W_c': rng.standard_normal((2, 2))}, 'c' * 64)
    reopened = ArtifactManager(workdir)
    assert reopened.exists('adaptor')
    assert reopened.verify('adaptor')
    assert [a.name for a in reopened.list_artifacts()] == ['adaptor']
    with open(reopened.path_for('adaptor'), 'ab') as f:
        f.write(b'\0')
    with pytest.raises(ArtifactMismatchError):
        reopened.verify('adaptor')


def test_unknown_artifact_names_are_rejected(manager):
    with pytest.raises(PreconditionError):
        manager.path_for('weights')


def test_run_tracker_writes_one_manifest_per_command(workdir):
    tracker = RunTracker(workdir)
    tracker.start('eval', 'c' * 64, 3, {'variant': 'v5'})
    tracker.record_metrics({'auc_cold': 0.61})
    tracker.record_artifact('ranker/v5_structure_reuse')
    path = tracker.finish('SUCCESS')
    assert path.endswith(os.path.join('manifests', 'eval.json'))
    history = RunTracker(workdir).get_run_history()
    assert history[0].command == 'eval'
    assert history[0].metrics == {'auc_cold': 0.61}
    assert history[0].status == 'SUCCESS'
    assert tracker.finish() is None
