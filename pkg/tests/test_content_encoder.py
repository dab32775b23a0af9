import numpy as np
import pytest

from content_encoder import PROMPT_SUFFIX, ContentEncoder, special_token_id
from corpus_generator import Item
from errors import DegenerateInputError, PreconditionError, ShapeError


@pytest.fixture
def encoder(encoder_config):
    return ContentEncoder(encoder_config)


def test_prompt_layout(encoder, corpus, gen_config):
    prompt = encoder.build_prompt(corpus.items[0])
    cfg = encoder.config
    assert len(prompt) == 1 + cfg.n_patches + gen_config.tokens_per_item + len(PROMPT_SUFFIX)
    assert prompt.token_ids[0] == special_token_id(cfg, 'BOS')
    assert np.all(prompt.token_ids[1:1 + cfg.n_patches] == special_token_id(cfg, 'IMG'))
    assert prompt.token_ids[-1] == special_token_id(cfg, 'EOS')
    assert special_token_id(cfg, 'EMB') in prompt.token_ids


def test_prompts_have_one_length_per_config(encoder, corpus):
    assert len({len(encoder.build_prompt(item)) for item in corpus.items}) == 1


def test_hidden_states_cover_every_layer(encoder, corpus):
    states = encoder.encode(encoder.build_prompt(corpus.items[3]))
    cfg = encoder.config
    assert states.n_layers == cfg.n_layers
    assert states.final.shape[1] == cfg.d_hidden
    assert all(np.all(np.isfinite(h)) for h in states.layers)


def test_coarse_proxies_are_unit_norm(encoder, corpus):
    prompts = [encoder.build_prompt(item) for item in corpus.items]
    z, h = encoder.embed_items(prompts)
    assert z.shape == (len(prompts), encoder.config.d_hidden)
    np.testing.assert_allclose(np.linalg.norm(h, axis=1), 1.0, atol=1e-12)


def test_results_do_not_depend_on_batch_size(encoder, corpus):
    prompts = [encoder.build_prompt(item) for item in corpus.items]
    _, h_big = encoder.embed_items(prompts, batch_size=256)
    _, h_small = encoder.embed_items(prompts, batch_size=3)
    np.testing.assert_allclose(h_big, h_small, atol=1e-10)


def test_final_layer_pooling_matches_embed_items(encoder, corpus):
    prompts = [encoder.build_prompt(item) for item in corpus.items[:5]]
    z, _ = encoder.embed_items(prompts)
    pooled = encoder.pooled_layers(prompts, [1, encoder.config.n_layers])
    assert pooled.shape == (5, 2, encoder.config.d_hidden)
    np.testing.assert_allclose(pooled[:, 1], z, atol=1e-12)


def test_parameter_hash_tracks_every_byte(encoder):
    clone = encoder.copy()
    assert clone.parameter_hash() == encoder.parameter_hash()
    clone.params['pool_q'][0] += 1e-12
    assert clone.parameter_hash() != encoder.parameter_hash()


def test_same_seed_same_parameters(encoder_config):
    assert ContentEncoder(encoder_config).parameter_hash() == ContentEncoder(encoder_config).parameter_hash()


def _item(tokens, patches):
    return Item(item_id=0, topic_id=0, latent=np.zeros(2), content_tokens=np.asarray(tokens),
                image_patches=np.asarray(patches), is_cold=False)


def test_empty_content_is_degenerate(encoder):
    cfg = encoder.config
    with pytest.raises(DegenerateInputError):
        encoder.build_prompt(_item([], np.zeros((cfg.n_patches, cfg.d_patch))))


def test_out_of_vocabulary_token_is_rejected(encoder):
    cfg = encoder.config
    with pytest.raises(PreconditionError):
        encoder.build_prompt(_item([cfg.vocab_size], np.zeros((cfg.n_patches, cfg.d_patch))))


def test_patch_shape_is_checked(encoder):
    with pytest.raises(ShapeError):
        encoder.build_prompt(_item([1, 2], np.zeros((1, 1))))
