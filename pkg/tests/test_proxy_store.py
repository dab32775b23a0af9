import json
import os

import numpy as np
import pytest

from content_encoder import ContentEncoder
from errors import (ArtifactMismatchError, DuplicateRecordError, PreconditionError, ProxyNotFoundError,
                    ShapeError, VersionConflictError)
from fine_adaptor import FineAdaptor
from layer_partitioner import partition_layers
from proxy_store import (HEADER_SIZE, ProxyRecord, ProxyStore, batch_generate, manifest_path,
                         record_dtype, write_proxies)


def _unit(x):
    return x / np.linalg.norm(x)


@pytest.fixture
def store_path(tmp_path):
    return str(tmp_path / 'proxies' / 'store.bin')


def _records(rng, ids, d=4, d_fine=3, version=1):
    return [ProxyRecord(item_id=i, p_coarse=_unit(rng.standard_normal(d)),
                        p_fine=rng.standard_normal(d_fine), version=version) for i in ids]


def test_lookup_returns_what_was_written_in_float32(store_path, rng):
    records = _records(rng, [3, 1, 7])
    write_proxies(records, store_path, stage1_hash='a' * 40, stage2_hash='b' * 40)
    store = ProxyStore.open(store_path)
    assert store.item_ids() == [1, 3, 7]
    found = store.lookup(7)
    np.testing.assert_array_equal(found.p_coarse, records[2].p_coarse.astype(np.float32))
    np.testing.assert_array_equal(found.p_fine, records[2].p_fine.astype(np.float32))
    assert found.stage1_hash == 'a' * 16
    with pytest.raises(ProxyNotFoundError):
        store.lookup(2)


def test_file_size_is_header_plus_fixed_width_records(store_path, rng):
    write_proxies(_records(rng, range(5)), store_path)
    width = record_dtype(4, 3).itemsize
    assert width == 8 + 8 + 1 + 16 + 16 + 4 * 4 + 4 * 3
    assert os.path.getsize(store_path) == HEADER_SIZE + 5 * width


def test_appending_a_newer_version_wins(store_path, rng):
    write_proxies(_records(rng, [0, 1]), store_path)
    newer = _records(rng, [1], version=2)
    manifest = write_proxies(newer, store_path)
    assert manifest['count'] == 3
    store = ProxyStore.open(store_path)
    assert len(store) == 2
    assert store.lookup(1).version == 2
    np.testing.assert_array_equal(store.lookup(1).p_coarse, newer[0].p_coarse.astype(np.float32))
    assert store.latest_versions() == {0: 1, 1: 2}
    assert [(r.item_id, r.version) for r in store.records()] == [(0, 1), (1, 2)]


def test_stale_versions_are_rejected(store_path, rng):
    write_proxies(_records(rng, [0], version=2), store_path)
    with pytest.raises(VersionConflictError):
        write_proxies(_records(rng, [0], version=2), store_path)
    with pytest.raises(VersionConflictError):
        write_proxies(_records(rng, [0], version=1), store_path)
    assert len(ProxyStore.open(store_path)) == 1


def test_duplicate_ids_in_one_write_are_rejected(store_path, rng):
    with pytest.raises(DuplicateRecordError):
        write_proxies(_records(rng, [4, 4]), store_path)
    assert not os.path.exists(store_path)


def test_records_must_match_the_store_dimensions(store_path, rng):
    write_proxies(_records(rng, [0]), store_path)
    with pytest.raises(ShapeError):
        write_proxies(_records(rng, [1], d=5), store_path)
    with pytest.raises(ShapeError):
        write_proxies(_records(rng, [1], d_fine=2), store_path)
    with pytest.raises(PreconditionError):
        write_proxies([ProxyRecord(item_id=2, p_coarse=np.full(4, 2.0))], store_path)


def test_coarse_only_records_have_no_fine_proxy(store_path, rng):
    write_proxies([ProxyRecord(item_id=0, p_coarse=_unit(rng.standard_normal(4)))], store_path)
    assert ProxyStore.open(store_path).lookup(0).p_fine is None


def test_manifest_checksum_covers_the_file(store_path, rng):
    import hashlib

    manifest = write_proxies(_records(rng, range(3)), store_path)
    with open(manifest_path(store_path), encoding='utf-8') as f:
        assert json.load(f) == manifest
    with open(store_path, 'rb') as f:
        assert hashlib.sha256(f.read()).hexdigest() == manifest['sha256']


def test_truncated_store_is_refused(store_path, rng):
    write_proxies(_records(rng, range(3)), store_path)
    with open(store_path, 'r+b') as f:
        f.truncate(os.path.getsize(store_path) - 1)
    with pytest.raises(PreconditionError):
        ProxyStore.open(store_path)
    with pytest.raises(PreconditionError):
        ProxyStore.open(store_path + '.missing')


def _adaptor_for(encoder, corpus):
    partition = partition_layers(encoder, corpus.items[:32])
    return FineAdaptor(d_hidden=encoder.config.d_hidden, d=encoder.config.d_id, adaptor_hidden=4,
                       layers=partition.layers)


def test_batch_generate_covers_cold_items(corpus, encoder_config, store_path):
    encoder = ContentEncoder(encoder_config)
    adaptor = _adaptor_for(encoder, corpus)
    cold = [corpus.items[i] for i in corpus.cold_item_ids()]
    records = batch_generate(cold, encoder, adaptor, {'encoder_hash': encoder.parameter_hash()},
                             batch_size=3)
    assert [r.item_id for r in records] == [item.item_id for item in cold]
    assert all(abs(np.linalg.norm(r.p_coarse) - 1.0) < 1e-9 for r in records)
    write_proxies(records, store_path)
    assert ProxyStore.open(store_path).item_ids() == sorted(r.item_id for r in records)


def test_batch_generate_refuses_an_adaptor_from_another_encoder(corpus, encoder_config):
    encoder = ContentEncoder(encoder_config)
    adaptor = _adaptor_for(encoder, corpus)
    with pytest.raises(ArtifactMismatchError):
        batch_generate(corpus.items[:2], encoder, adaptor, {'encoder_hash': 'f' * 64})
