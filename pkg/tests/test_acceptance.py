"""Desk-scale acceptance runs; minutes each, so they only run with -m slow."""
import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from cli import main
from config_manager import load_run_config
from corpus_generator import InteractionSet, generate_corpus, split_train_eval
from experiment_runner import run_ablation
from metrics import auc, cluster_silhouette
from pipeline import Pipeline
from proxy_store import ProxyRecord, ProxyStore, write_proxies
from conftest import DEFAULT_CONFIG, SMOKE_CONFIG

pytestmark = pytest.mark.slow


def _oracle_features(corpus, interactions):
    latents = np.stack([item.latent for item in corpus.items])
    products = corpus.user_latents[interactions.user_id] * latents[interactions.item_id]
    return np.concatenate([products, interactions.scalars], axis=1)


def test_planted_signal_is_recoverable():
    corpus = generate_corpus(load_run_config(DEFAULT_CONFIG).generation)
    train, eval_warm, eval_cold = split_train_eval(corpus)
    held_out = InteractionSet.union(eval_warm, eval_cold)
    model = LogisticRegression(max_iter=1000).fit(_oracle_features(corpus, train), train.label)
    scores = model.predict_proba(_oracle_features(corpus, held_out))[:, 1]
    assert auc(scores, held_out.label) >= 0.80


def test_id_space_modes_differ_in_cluster_structure(tmp_path):
    silhouettes = {}
    for mode in ('clustered', 'irregular'):
        config = load_run_config(DEFAULT_CONFIG)
        config.generation.id_space_mode = mode
        pipeline = Pipeline(config, str(tmp_path / mode))
        corpus = generate_corpus(config.generation)
        silhouettes[mode] = cluster_silhouette(pipeline.id_table(corpus).vectors, 3)
    assert silhouettes['clustered'] > 0.4
    assert silhouettes['irregular'] < 0.1


def test_stage1_alignment_quality(tmp_path):
    pipeline = Pipeline(load_run_config(DEFAULT_CONFIG), str(tmp_path / 'run'))
    pipeline.gen_data()
    metrics = pipeline.train_stage1()
    assert metrics['top1'] >= 0.6
    assert metrics['mean_cosine'] >= 0.5


def test_encoder_is_frozen_through_stage2(tmp_path):
    pipeline = Pipeline(load_run_config(SMOKE_CONFIG), str(tmp_path / 'run'))
    pipeline.gen_data()
    pipeline.train_stage1()
    pipeline.partition_layers()
    before = pipeline.load_encoder().parameter_hash()
    pipeline.train_stage2()
    pipeline.train_ranker('v4')
    assert pipeline.load_encoder().parameter_hash() == before


def test_store_round_trip_at_scale(tmp_path, rng):
    path = str(tmp_path / 'store.bin')
    coarse = rng.standard_normal((10_000, 16))
    coarse /= np.linalg.norm(coarse, axis=1, keepdims=True)
    fine = rng.standard_normal((10_000, 16))
    write_proxies([ProxyRecord(item_id=i, p_coarse=coarse[i], p_fine=fine[i]) for i in range(10_000)], path)
    write_proxies([ProxyRecord(item_id=i, p_coarse=coarse[i], p_fine=-fine[i], version=2)
                   for i in range(0, 10_000, 10)], path)
    store = ProxyStore.open(path)
    assert len(store) == 10_000
    for i in range(0, 10_000, 7):
        record = store.lookup(i)
        np.testing.assert_array_equal(record.p_coarse, coarse[i].astype(np.float32))
        sign = -1.0 if i % 10 == 0 else 1.0
        np.testing.assert_array_equal(record.p_fine, (sign * fine[i]).astype(np.float32))
        assert record.version == (2 if i % 10 == 0 else 1)


def test_ablation_report_is_reproducible(tmp_path):
    texts = []
    for name in ('a', 'b'):
        workdir = str(tmp_path / name)
        assert main(['ablation', '--seeds', '1', '--config', SMOKE_CONFIG, '--workdir', workdir]) == 0
        with open(f"{workdir}/ablation/report.json", encoding='utf-8') as f:
            texts.append(f.read())
    assert texts[0] == texts[1]


def test_cold_items_gain_most_from_the_full_model(tmp_path):
    report = run_ablation(load_run_config(DEFAULT_CONFIG), str(tmp_path / 'run'))
    medians = report.medians()
    flags = report.flags()
    assert flags['ladder_ordered_cold'], report.to_markdown()
    assert flags['v5_cold_gain_exceeds_warm'], report.to_markdown()
    assert medians['v5_structure_reuse']['delta']['cold'] >= 0.03
