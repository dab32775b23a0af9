"""
ProxyStore - Append-only file store for coarse/fine proxies with ID lookup

File layout:
    [0, 1024)          JSON header padded with spaces (magic, format_version,
                       d, d_fine, count, record_width, stage hashes of the
                       latest write)
    [1024, ...)        count fixed-width little-endian records

Record: item_id <i8, version <i8, has_fine u1, stage1_hash S16,
stage2_hash S16, p_coarse <f4[d], p_fine <f4[d_fine].
"""
import hashlib
import json
import os
import time
from dataclasses import dataclass
from typing import Dict, Iterable, Iterator, List, Optional, Sequence

import numpy as np

from artifact_manager import tensor_hash
from errors import (ArtifactMismatchError, DuplicateRecordError, PreconditionError,
                    ProxyNotFoundError, ShapeError, VersionConflictError)
from log_manager import LogManager
from run_tracker import host_fingerprint

MAGIC = 'IDPROXY-STORE'
FORMAT_VERSION = 1
HEADER_SIZE = 1024
HASH_CHARS = 16
UNIT_NORM_TOLERANCE = 1e-3


def record_dtype(d: int, d_fine: int) -> np.dtype:
    return np.dtype([
        ('item_id', '<i8'),
        ('version', '<i8'),
        ('has_fine', 'u1'),
        ('stage1_hash', f"S{HASH_CHARS}"),
        ('stage2_hash', f"S{HASH_CHARS}"),
        ('coarse', '<f4', (d,)),
        ('fine', '<f4', (d_fine,)),
    ])


def manifest_path(path: str) -> str:
    return path + '.manifest.json'


@dataclass
class ProxyRecord:
    """Proxies of one item as stored (32-bit floats)."""

    item_id: int
    p_coarse: np.ndarray
    p_fine: Optional[np.ndarray] = None
    version: int = 1
    stage1_hash: str = ''
    stage2_hash: str = ''


def _short(value: str) -> bytes:
    return value[:HASH_CHARS].encode('ascii')


def _read_header(path: str) -> Dict:
    with open(path, 'rb') as f:
        raw = f.read(HEADER_SIZE)
    if len(raw) != HEADER_SIZE:
        raise PreconditionError(f"proxy store header truncated: {path}")
    try:
        header = json.loads(raw.decode('utf-8').rstrip())
    except ValueError as e:
        raise PreconditionError(f"proxy store header unreadable: {path}") from e
    if header.get('magic') != MAGIC:
        raise PreconditionError(f"not a proxy store: {path}")
    return header


def _encode_header(header: Dict) -> bytes:
    raw = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')
    if len(raw) > HEADER_SIZE:
        raise PreconditionError('proxy store header exceeds 1024 bytes')
    return raw + b' ' * (HEADER_SIZE - len(raw))


def write_proxies(records: Sequence[ProxyRecord], path: str, stage1_hash: str = '',
                  stage2_hash: str = '') -> Dict:
    """
    Append records to a store file (created on first write), atomically.

    Args:
        records: Records to append; item ids must be unique within the call
        path: Store file
        stage1_hash: Hash of the artifacts that produced the coarse proxies
        stage2_hash: Hash of the artifacts that produced the fine proxies

    Returns:
        Manifest dict (count, sha256, dimensions, hashes), also written
        next to the store as <path>.manifest.json
    """
    records = list(records)
    seen = set()
    for record in records:
        if record.item_id in seen:
            raise DuplicateRecordError(f"item {record.item_id} appears twice in one write")
        seen.add(record.item_id)

    existing = b''
    latest: Dict[int, int] = {}
    if os.path.exists(path):
        header = _read_header(path)
        d, d_fine = header['d'], header['d_fine']
        store = ProxyStore.open(path)
        latest = store.latest_versions()
        with open(path, 'rb') as f:
            f.seek(HEADER_SIZE)
            existing = f.read(header['count'] * header['record_width'])
    else:
        if not records:
            raise PreconditionError('write_proxies: nothing to write to a new store')
        d = int(np.asarray(records[0].p_coarse).shape[-1])
        with_fine = [r for r in records if r.p_fine is not None]
        d_fine = int(np.asarray(with_fine[0].p_fine).shape[-1]) if with_fine else d

    dtype = record_dtype(d, d_fine)
    block = np.zeros(len(records), dtype=dtype)
    for row, record in enumerate(records):
        coarse = np.asarray(record.p_coarse, dtype=np.float64)
        if coarse.shape != (d,):
            raise ShapeError(f"write_proxies[item {record.item_id}].p_coarse", coarse.shape, (d,))
        if abs(np.linalg.norm(coarse) - 1.0) > UNIT_NORM_TOLERANCE:
            raise PreconditionError(f"write_proxies: p_coarse of item {record.item_id} is not unit norm")
        if record.p_fine is not None:
            fine = np.asarray(record.p_fine, dtype=np.float64)
            if fine.shape != (d_fine,):
                raise ShapeError(f"write_proxies[item {record.item_id}].p_fine", fine.shape, (d_fine,))
            block[row]['fine'] = fine
            block[row]['has_fine'] = 1
        previous = latest.get(int(record.item_id))
        if previous is not None and record.version <= previous:
            raise VersionConflictError(
                f"item {record.item_id}: version {record.version} does not exceed stored {previous}")
        block[row]['item_id'] = record.item_id
        block[row]['version'] = record.version
        block[row]['stage1_hash'] = _short(record.stage1_hash or stage1_hash)
        block[row]['stage2_hash'] = _short(record.stage2_hash or stage2_hash)
        block[row]['coarse'] = coarse

    count = len(existing) // dtype.itemsize + len(records)
    header = {
        'magic': MAGIC, 'format_version': FORMAT_VERSION, 'd': d, 'd_fine': d_fine,
        'count': count, 'record_width': dtype.itemsize,
        'stage1_hash': stage1_hash, 'stage2_hash': stage2_hash,
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp_path = path + '.tmp'
    digest = hashlib.sha256()
    with open(tmp_path, 'wb') as f:
        for chunk in (_encode_header(header), existing, block.tobytes()):
            f.write(chunk)
            digest.update(chunk)
    os.replace(tmp_path, path)

    manifest = {
        'path': os.path.basename(path), 'count': count, 'sha256': digest.hexdigest(),
        'd': d, 'd_fine': d_fine, 'record_width': dtype.itemsize,
        'format_version': FORMAT_VERSION, 'stage1_hash': stage1_hash, 'stage2_hash': stage2_hash,
    }
    with open(manifest_path(path), 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


class ProxyStore:
    """Read side of a store file: memory-mapped records and an id index."""

    def __init__(self, path: str, header: Dict, records: np.ndarray):
        self.path = path
        self.header = header
        self.d = int(header['d'])
        self.d_fine = int(header['d_fine'])
        self._records = records
        self._index: Dict[int, int] = {}
        for row in range(len(records)):
            item_id = int(records['item_id'][row])
            current = self._index.get(item_id)
            if current is None or records['version'][row] >= records['version'][current]:
                self._index[item_id] = row

    @staticmethod
    def open(path: str) -> 'ProxyStore':
        """Open a store; the highest version of each item wins."""
        if not os.path.exists(path):
            raise PreconditionError(f"proxy store not found: {path}")
        header = _read_header(path)
        dtype = record_dtype(int(header['d']), int(header['d_fine']))
        if dtype.itemsize != header['record_width']:
            raise PreconditionError(f"record width mismatch in {path}")
        count = int(header['count'])
        if os.path.getsize(path) != HEADER_SIZE + count * dtype.itemsize:
            raise PreconditionError(f"proxy store size does not match its header: {path}")
        if count == 0:
            records = np.zeros(0, dtype=dtype)
        else:
            records = np.memmap(path, dtype=dtype, mode='r', offset=HEADER_SIZE, shape=(count,))
        return ProxyStore(path, header, records)

    def __len__(self) -> int:
        return len(self._index)

    def __contains__(self, item_id: int) -> bool:
        return int(item_id) in self._index

    def item_ids(self) -> List[int]:
        return sorted(self._index)

    def latest_versions(self) -> Dict[int, int]:
        return {item_id: int(self._records['version'][row]) for item_id, row in self._index.items()}

    def _record(self, row: int) -> ProxyRecord:
        raw = self._records[row]
        return ProxyRecord(
            item_id=int(raw['item_id']),
            p_coarse=np.array(raw['coarse'], dtype=np.float32),
            p_fine=np.array(raw['fine'], dtype=np.float32) if raw['has_fine'] else None,
            version=int(raw['version']),
            stage1_hash=bytes(raw['stage1_hash']).decode('ascii'),
            stage2_hash=bytes(raw['stage2_hash']).decode('ascii'),
        )

    def lookup(self, item_id: int) -> ProxyRecord:
        """Latest record of an item, or ProxyNotFoundError."""
        row = self._index.get(int(item_id))
        if row is None:
            raise ProxyNotFoundError(item_id)
        return self._record(row)

    def records(self) -> Iterator[ProxyRecord]:
        """Latest version of every item, in item-id order."""
        for item_id in self.item_ids():
            yield self._record(self._index[item_id])


def batch_generate(items: Iterable, encoder, adaptor, adaptor_meta: Dict,
                   version: int = 1, batch_size: int = 256) -> List[ProxyRecord]:
    """
    Coarse and fine proxies for items the models never trained on.

    Args:
        items: Items with content (typically the cold ones)
        encoder: Frozen Stage-1 ContentEncoder
        adaptor: Trained FineAdaptor (its layers give the pooled subgroups)
        adaptor_meta: Checkpoint meta of the adaptor; its encoder_hash must
            match the encoder
        version: Version stamped on every record
        batch_size: Encoder batch size

    Returns:
        One ProxyRecord per item, in input order
    """
    log_manager = LogManager()
    stage1_hash = encoder.parameter_hash()
    expected = adaptor_meta.get('encoder_hash')
    if expected != stage1_hash:
        raise ArtifactMismatchError(
            f"adaptor was trained on encoder {str(expected)[:12]}, got {stage1_hash[:12]}; "
            "re-run train-stage2 after train-stage1")
    stage2_hash = tensor_hash(adaptor.state_dict())
    items = list(items)
    if not items:
        return []

    started = time.perf_counter()
    prompts = [encoder.build_prompt(item) for item in items]
    _, coarse = encoder.embed_items(prompts, batch_size=batch_size)
    pooled = encoder.pooled_layers(prompts, adaptor.layers, batch_size=batch_size)
    fine, _ = adaptor.forward(pooled, coarse)
    elapsed = max(time.perf_counter() - started, 1e-9)

    records = [ProxyRecord(item_id=int(item.item_id), p_coarse=coarse[row], p_fine=fine[row],
                           version=version, stage1_hash=stage1_hash, stage2_hash=stage2_hash)
               for row, item in enumerate(items)]
    throughput = len(items) / elapsed
    log_manager.log_evaluation(f"batch_generate: {len(items)} items at {throughput:.1f} items/s",
                               {'items': len(items), 'seconds': elapsed,
                                'items_per_second': throughput, 'host': host_fingerprint()})
    return records
