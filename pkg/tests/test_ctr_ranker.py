import numpy as np
import pytest

from corpus_generator import ContextFeatures, split_train_eval
from ctr_ranker import (Batch, CTRRanker, ItemFeatures, pairwise_dots, required_features,
                        target_attention, train_ranker)
from errors import PreconditionError, ProxyNotFoundError
from fine_adaptor import FineAdaptor
from proxy_store import ProxyRecord, ProxyStore, write_proxies
from conftest import tiny_ranker_config

N_USERS, N_ITEMS, D, D_CONTENT = 4, 6, 3, 5


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _batch(rng):
    return Batch(user_ids=np.array([0, 1, 2, 3]), item_ids=np.array([5, 4, 0, 2]),
                 history=np.array([[1, 2, -1], [3, -1, -1], [-1, -1, -1], [0, 1, 4]]),
                 scalars=rng.standard_normal((4, 2)), labels=np.array([1, 0, 0, 1]))


def _features(rng, **kwargs):
    return ItemFeatures(n_items=N_ITEMS, content=rng.standard_normal((N_ITEMS, D_CONTENT)),
                        static=rng.standard_normal((N_ITEMS, D)),
                        coarse=_unit(rng.standard_normal((N_ITEMS, D))),
                        fine=rng.standard_normal((N_ITEMS, D)), **kwargs)


def _ranker(variant, seed=7):
    cfg = tiny_ranker_config(D, variant=variant, hidden_sizes=(6, 4), seed=seed)
    return CTRRanker(cfg, n_users=N_USERS, n_items=N_ITEMS, n_scalars=2, d_content=D_CONTENT)


@pytest.mark.parametrize('variant', ['v1', 'v2', 'v3', 'v4', 'v5'])
def test_zeroed_proxy_weights_reduce_every_variant_to_base(variant, rng):
    batch, features = _batch(rng), _features(rng)
    base, _ = _ranker('base').forward(batch, features)
    ranker = _ranker(variant)
    ranker.zero_proxy_weights()
    probs, _ = ranker.forward(batch, features)
    np.testing.assert_array_equal(probs, base)


def test_proxy_weights_change_the_prediction(rng):
    batch, features = _batch(rng), _features(rng)
    base, _ = _ranker('base').forward(batch, features)
    v5, _ = _ranker('v5').forward(batch, features)
    assert not np.allclose(base, v5)


def test_missing_inputs_fail_before_scoring(rng):
    batch = _batch(rng)
    with pytest.raises(ProxyNotFoundError):
        _ranker('v3').forward(batch, ItemFeatures(n_items=N_ITEMS))
    coarse_only = ItemFeatures(n_items=N_ITEMS, coarse=_unit(rng.standard_normal((N_ITEMS, D))))
    with pytest.raises(ProxyNotFoundError):
        _ranker('v5').forward(batch, coarse_only)


def test_required_features_follow_the_variant():
    assert required_features('base') == ()
    assert required_features('v1') == ('content',)
    assert required_features('v2_mlp_map') == ('static',)
    assert required_features('v4') == ('coarse', 'fine')


def test_strict_features_reject_unknown_items_and_lenient_ones_zero_them(rng):
    coarse = _unit(rng.standard_normal((N_ITEMS, D)))
    present = np.ones(N_ITEMS, dtype=bool)
    present[4] = False
    strict = ItemFeatures(n_items=N_ITEMS, coarse=coarse, masks={'coarse': present})
    with pytest.raises(ProxyNotFoundError) as info:
        strict.rows('coarse', np.array([1, 4]), 'v3_coarse')
    assert info.value.item_id == 4
    lenient = ItemFeatures(n_items=N_ITEMS, coarse=coarse, masks={'coarse': present}, strict=False)
    rows = lenient.rows('coarse', np.array([1, 4]), 'v3_coarse')
    np.testing.assert_array_equal(rows[0], coarse[1])
    np.testing.assert_array_equal(rows[1], 0.0)


def test_features_from_store_mask_absent_items(tmp_path, rng):
    path = str(tmp_path / 'proxies.bin')
    coarse = _unit(rng.standard_normal((2, D)))
    write_proxies([ProxyRecord(item_id=1, p_coarse=coarse[0], p_fine=np.ones(D)),
                   ProxyRecord(item_id=3, p_coarse=coarse[1])], path)
    features = ItemFeatures.from_store(ProxyStore.open(path), N_ITEMS)
    assert features.masks['coarse'].tolist() == [False, True, False, True, False, False]
    assert features.masks['fine'].tolist() == [False, True, False, False, False, False]
    np.testing.assert_allclose(features.coarse[3], coarse[1], atol=1e-6)
    assert not features.strict
    strict = ItemFeatures.from_store(ProxyStore.open(path), N_ITEMS, strict=True)
    with pytest.raises(ProxyNotFoundError):
        strict.rows('fine', np.array([3]), 'v5_structure_reuse')


def test_pairwise_dots_use_row_major_pair_order():
    fields = np.array([[[1.0, 0.0], [2.0, 1.0], [0.0, 3.0]]])
    # (0,1) (0,2) (1,2)
    np.testing.assert_array_equal(pairwise_dots(fields), [[2.0, 0.0, 3.0]])


def test_attention_over_an_empty_history_is_zero(rng):
    keys = rng.standard_normal((2, 3, D))
    mask = np.array([[True, True, False], [False, False, False]])
    W = [rng.standard_normal((D, D)) for _ in range(3)]
    summary, _ = target_attention(keys, rng.standard_normal((2, D)), mask, *W)
    np.testing.assert_array_equal(summary[1], 0.0)
    assert np.any(summary[0] != 0.0)


def test_single_request_scoring_matches_batch_scoring(rng):
    ranker, features = _ranker('v3'), _features(rng)
    batch = _batch(rng)
    probs, _ = ranker.forward(batch, features)
    context = ContextFeatures(history=np.array([1, 2]), scalars=batch.scalars[0])
    assert ranker.predict_ctr(0, 5, context, features) == pytest.approx(probs[0], abs=1e-12)


def test_state_dict_round_trip(rng):
    ranker, features = _ranker('v4'), _features(rng)
    restored = CTRRanker.from_state_dict(ranker.cfg, ranker.state_dict(), ranker.meta())
    assert restored.variant == 'v4_concat_fine'
    np.testing.assert_array_equal(restored.forward(_batch(rng), features)[0],
                                  ranker.forward(_batch(rng), features)[0])


# -- training ---------------------------------------------------------------

def _corpus_features(corpus, rng, d):
    return ItemFeatures(n_items=corpus.n_items, coarse=_unit(rng.standard_normal((corpus.n_items, d))),
                        pooled=rng.standard_normal((corpus.n_items, 3, 8)))


def test_training_leaves_cold_item_rows_untouched(corpus, gen_config):
    train, _, _ = split_train_eval(corpus)
    cfg = tiny_ranker_config(gen_config.d_id, epochs=2)
    result = train_ranker(train, ItemFeatures(n_items=corpus.n_items), cfg,
                          n_users=gen_config.n_users, d_content=8)
    initial = CTRRanker(cfg, n_users=gen_config.n_users, n_items=corpus.n_items,
                        n_scalars=train.scalars.shape[1], d_content=8)
    cold = corpus.cold_item_ids()
    warm = corpus.warm_item_ids()
    trained = result.ranker.params['item_emb']
    np.testing.assert_array_equal(trained[cold], initial.params['item_emb'][cold])
    assert not np.allclose(trained[warm], initial.params['item_emb'][warm])


def test_training_reduces_the_loss(corpus, gen_config):
    train, _, _ = split_train_eval(corpus)
    cfg = tiny_ranker_config(gen_config.d_id, epochs=4, batch_size=64)
    result = train_ranker(train, ItemFeatures(n_items=corpus.n_items), cfg,
                          n_users=gen_config.n_users, d_content=8)
    assert len(result.loss_history) == 4
    assert result.loss_history[-1] < result.loss_history[0]
    assert result.adaptor is None


def test_structure_reuse_trains_the_adaptor_jointly(corpus, gen_config, rng):
    train, _, _ = split_train_eval(corpus)
    d = gen_config.d_id
    adaptor = FineAdaptor(d_hidden=8, d=d, adaptor_hidden=4, seed=2)
    before = {name: value.copy() for name, value in adaptor.params.items()}
    cfg = tiny_ranker_config(d, variant='v5', epochs=1)
    result = train_ranker(train, _corpus_features(corpus, rng, d), cfg,
                          n_users=gen_config.n_users, d_content=8, adaptor=adaptor)
    assert result.adaptor is adaptor
    assert any(not np.array_equal(before[name], value) for name, value in adaptor.params.items())


def test_adaptor_is_ignored_by_variants_without_fine_proxies(corpus, gen_config, rng):
    train, _, _ = split_train_eval(corpus)
    d = gen_config.d_id
    adaptor = FineAdaptor(d_hidden=8, d=d, adaptor_hidden=4, seed=2)
    before = {name: value.copy() for name, value in adaptor.params.items()}
    result = train_ranker(train, _corpus_features(corpus, rng, d), tiny_ranker_config(d, variant='v3'),
                          n_users=gen_config.n_users, d_content=8, adaptor=adaptor)
    assert result.adaptor is None
    for name, value in adaptor.params.items():
        np.testing.assert_array_equal(value, before[name])


def test_empty_training_split_is_rejected(corpus, gen_config):
    train, _, _ = split_train_eval(corpus)
    with pytest.raises(PreconditionError):
        train_ranker(train.subset(np.zeros(len(train), dtype=bool)), ItemFeatures(n_items=corpus.n_items),
                     tiny_ranker_config(gen_config.d_id), n_users=gen_config.n_users, d_content=8)
