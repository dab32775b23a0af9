"""Shared fixtures: src/ on the path, logs in a temp dir, tiny corpora and configs."""
import os
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, os.path.join(ROOT, 'src'))
os.environ.setdefault('IDPROXY_LOG_DIR', tempfile.mkdtemp(prefix='idproxy-logs-'))
os.environ['IDPROXY_QUIET'] = '1'
os.environ.pop('IDPROXY_SEED', None)

import numpy as np
import pytest

from config_manager import EncoderConfig, GenConfig, RankerConfig, load_run_config
from corpus_generator import generate_corpus

SMOKE_CONFIG = os.path.join(ROOT, 'configs', 'smoke.yaml')
DEFAULT_CONFIG = os.path.join(ROOT, 'configs', 'default.yaml')


def tiny_gen_config(**overrides) -> GenConfig:
    values = dict(n_users=60, n_items=40, n_topics=3, d_latent=4, vocab_size=30, tokens_per_item=6,
                  n_interactions=1500, cold_fraction=0.2, history_len=5, d_id=6, n_patches=2,
                  d_patch=3, seed=0)
    values.update(overrides)
    return GenConfig(**values)


def tiny_encoder_for(gen: GenConfig, **overrides) -> EncoderConfig:
    values = dict(n_layers=4, d_hidden=8, n_heads=2, vocab_size=gen.vocab_size, max_tokens=18,
                  d_id=gen.d_id, d_ff=16, n_patches=gen.n_patches, d_patch=gen.d_patch, seed=1)
    values.update(overrides)
    return EncoderConfig(**values)


def tiny_ranker_config(d: int, **overrides) -> RankerConfig:
    values = dict(d=d, hidden_sizes=(16, 8), lr=3e-3, epochs=1, batch_size=128, seed=4)
    values.update(overrides)
    return RankerConfig(**values)


@pytest.fixture
def gen_config():
    return tiny_gen_config()


@pytest.fixture
def corpus(gen_config):
    return generate_corpus(gen_config)


@pytest.fixture
def encoder_config(gen_config):
    return tiny_encoder_for(gen_config)


@pytest.fixture
def smoke_config():
    return load_run_config(SMOKE_CONFIG, seed=0)


@pytest.fixture
def workdir(tmp_path):
    return str(tmp_path / 'run')


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
