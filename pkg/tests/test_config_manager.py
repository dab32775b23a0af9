import pytest

from config_manager import RunConfig, load_run_config, resolve_variant
from errors import ConfigurationError
from conftest import DEFAULT_CONFIG, SMOKE_CONFIG


def test_defaults_load_without_a_file():
    config = load_run_config(None)
    assert config.seed == 0
    assert config.ranker.d == config.generation.d_id


def test_shipped_configs_are_valid():
    for path in (DEFAULT_CONFIG, SMOKE_CONFIG):
        config = load_run_config(path)
        assert config.encoder.vocab_size == config.generation.vocab_size
        assert config.encoder.d_id == config.generation.d_id


def test_seed_flag_beats_environment_beats_file(monkeypatch):
    assert load_run_config(SMOKE_CONFIG).seed == 0
    monkeypatch.setenv('IDPROXY_SEED', '7')
    assert load_run_config(SMOKE_CONFIG).seed == 7
    assert load_run_config(SMOKE_CONFIG, seed=3).seed == 3


def test_bad_environment_seed_is_a_configuration_error(monkeypatch):
    monkeypatch.setenv('IDPROXY_SEED', 'seven')
    with pytest.raises(ConfigurationError) as info:
        load_run_config(None)
    assert info.value.field == 'IDPROXY_SEED'


def test_stage_seeds_derive_from_the_run_seed():
    config = load_run_config(None, seed=10)
    seeds = (config.generation.seed, config.encoder.seed, config.stage1.seed,
             config.stage2.seed, config.ranker.seed)
    assert seeds == (10, 11, 12, 13, 14)


def test_config_hash_tracks_content():
    a = load_run_config(SMOKE_CONFIG, seed=0)
    assert a.config_hash() == load_run_config(SMOKE_CONFIG, seed=0).config_hash()
    assert a.config_hash() != load_run_config(SMOKE_CONFIG, seed=1).config_hash()
    assert RunConfig.from_dict(a.to_dict()).config_hash() == a.config_hash()


def test_unknown_keys_are_rejected(tmp_path):
    path = tmp_path / 'bad.yaml'
    path.write_text('ranker:\n  depth: 3\n', encoding='utf-8')
    with pytest.raises(ConfigurationError) as info:
        load_run_config(str(path))
    assert info.value.field == 'ranker.depth'
    path.write_text('training:\n  epochs: 3\n', encoding='utf-8')
    with pytest.raises(ConfigurationError):
        load_run_config(str(path))


def test_missing_or_malformed_files(tmp_path):
    with pytest.raises(ConfigurationError):
        load_run_config(str(tmp_path / 'absent.yaml'))
    path = tmp_path / 'list.yaml'
    path.write_text('- 1\n- 2\n', encoding='utf-8')
    with pytest.raises(ConfigurationError):
        load_run_config(str(path))


def test_ranker_width_must_match_the_id_space(tmp_path):
    path = tmp_path / 'width.yaml'
    path.write_text('generation:\n  d_id: 8\nranker:\n  d: 16\n', encoding='utf-8')
    with pytest.raises(ConfigurationError) as info:
        load_run_config(str(path))
    assert info.value.field == 'ranker.d'


def test_variant_aliases():
    assert resolve_variant('v5') == 'v5_structure_reuse'
    assert resolve_variant('v3_coarse') == 'v3_coarse'
    with pytest.raises(ConfigurationError):
        resolve_variant('v6')
