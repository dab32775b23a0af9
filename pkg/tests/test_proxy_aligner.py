import numpy as np
import pytest

from config_manager import Stage1Config
from content_encoder import ContentEncoder
from errors import DegenerateInputError, EmptyTableError, PreconditionError, ShapeError
from proxy_aligner import (alignment_metrics, pal_loss, pal_loss_backward, preprocess_id_table,
                           retrieval_eval, train_stage1)


def _unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.mark.parametrize('temperature', [0.5, 1.0, 2.0])
def test_orthonormal_pair_matches_closed_form(temperature):
    eye = np.eye(2)
    expected = np.log1p(np.exp(-1.0 / temperature))
    assert abs(pal_loss(eye, eye, temperature) - expected) < 1e-9


def test_loss_is_non_negative_and_minimal_for_aligned_well_separated_pairs(rng):
    E = np.eye(4)
    aligned = pal_loss(E, E, 0.07)
    shuffled = pal_loss(E[[1, 2, 3, 0]], E, 0.07)
    assert 0.0 <= aligned < 1e-5
    assert shuffled > 10.0


def test_gradient_matches_a_forward_difference(rng):
    H = _unit_rows(rng, 5, 3)
    E = _unit_rows(rng, 5, 3)
    g = pal_loss_backward(H, E, 0.5)
    assert g.shape == H.shape
    eps = 1e-6
    bumped = H.copy()
    bumped[2, 1] += eps
    numeric = (pal_loss(bumped, E, 0.5) - pal_loss(H, E, 0.5)) / eps
    assert numeric == pytest.approx(g[2, 1], rel=1e-3, abs=1e-6)


def test_non_unit_rows_are_rejected():
    with pytest.raises(PreconditionError):
        pal_loss(2.0 * np.eye(2), np.eye(2), 1.0)
    with pytest.raises(ShapeError):
        pal_loss(np.eye(2), np.eye(3), 1.0)


def test_preprocessing_filters_and_normalizes():
    raw = {0: (np.array([3.0, 4.0]), 10), 1: (np.array([1.0, 0.0]), 2), 2: (np.array([0.0, -2.0]), 5)}
    table = preprocess_id_table(raw, tau=5)
    assert table.item_ids.tolist() == [0, 2]
    assert table.n_filtered == 1
    np.testing.assert_allclose(table.lookup(0), [0.6, 0.8])
    np.testing.assert_allclose(table.lookup(2), [0.0, -1.0])
    assert 1 not in table


def test_zero_norm_only_matters_for_survivors():
    raw = {0: (np.zeros(2), 1), 1: (np.array([1.0, 1.0]), 9)}
    assert preprocess_id_table(raw, tau=5).item_ids.tolist() == [1]
    with pytest.raises(DegenerateInputError) as info:
        preprocess_id_table({0: (np.zeros(2), 9)}, tau=5)
    assert info.value.item_ids == [0]


def test_everything_filtered_is_an_empty_table():
    with pytest.raises(EmptyTableError):
        preprocess_id_table({0: (np.ones(2), 1)}, tau=5)


def test_perfect_proxies_retrieve_themselves(rng):
    vectors = _unit_rows(rng, 20, 6)
    table = preprocess_id_table({i: (vectors[i], 10) for i in range(20)}, tau=1)
    assert retrieval_eval(vectors, table, k=1) == 1.0
    metrics = alignment_metrics(vectors, table)
    assert metrics['top1'] == metrics['top5'] == metrics['top10'] == 1.0
    assert metrics['mean_cosine'] == pytest.approx(1.0)
    assert metrics['n_targets'] == 20
    with pytest.raises(PreconditionError):
        retrieval_eval(vectors, table, k=21)


def test_stage1_training_reduces_the_loss_and_keeps_the_snapshot(corpus, encoder_config):
    table = preprocess_id_table({i: e for i, e in corpus.raw_id_entries().items()
                                 if not corpus.cold_mask[i]}, tau=1)
    cfg = Stage1Config(tau=1, temperature=0.1, batch_size=16, lr=3e-3, epochs=8, seed=2)
    fresh_hash = ContentEncoder(encoder_config).parameter_hash()
    result = train_stage1(corpus, table, cfg, encoder_config)
    assert result.loss_history[-1] < result.loss_history[0]
    assert result.initial_encoder.parameter_hash() == fresh_hash
    assert result.encoder.parameter_hash() != fresh_hash
    assert result.coarse.shape == (corpus.n_items, encoder_config.d_id)
    np.testing.assert_allclose(np.linalg.norm(result.coarse, axis=1), 1.0, atol=1e-12)


def test_stage1_is_deterministic(corpus, encoder_config):
    table = preprocess_id_table({i: e for i, e in corpus.raw_id_entries().items()
                                 if not corpus.cold_mask[i]}, tau=1)
    cfg = Stage1Config(tau=1, batch_size=8, lr=1e-3, epochs=1, seed=5)
    a = train_stage1(corpus, table, cfg, encoder_config)
    b = train_stage1(corpus, table, cfg, encoder_config)
    assert a.encoder.parameter_hash() == b.encoder.parameter_hash()
    np.testing.assert_array_equal(a.coarse, b.coarse)


def test_oversized_batch_is_clamped(corpus, encoder_config):
    table = preprocess_id_table({i: e for i, e in corpus.raw_id_entries().items()
                                 if not corpus.cold_mask[i]}, tau=1)
    cfg = Stage1Config(tau=1, batch_size=512, lr=1e-3, epochs=1)
    result = train_stage1(corpus, table, cfg, encoder_config)
    assert len(result.loss_history) == 1
    assert np.isfinite(result.loss_history[0])
