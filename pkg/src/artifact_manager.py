"""
ArtifactManager - Registry of pipeline artifacts and the named-tensor checkpoint format
"""
import hashlib
import json
import os
import struct
import time
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from errors import ArtifactMismatchError, DependencyError, PreconditionError
from log_manager import LogManager

# artifact name -> (relative path, producing subcommand)
ARTIFACT_LAYOUT = {
    'corpus': ('corpus', 'gen-data'),
    'encoder': ('stage1/encoder.ckpt', 'train-stage1'),
    'encoder_init': ('stage1/encoder_init.ckpt', 'train-stage1'),
    'coarse_proxies': ('stage1/coarse_proxies.bin', 'train-stage1'),
    'id_targets': ('stage1/id_targets.ckpt', 'train-stage1'),
    'stage1_metrics': ('stage1/metrics.json', 'train-stage1'),
    'partition': ('partition.json', 'partition-layers'),
    'pooled_cache': ('stage2/pooled_cache.ckpt', 'partition-layers'),
    'adaptor': ('stage2/adaptor.ckpt', 'train-stage2'),
    'fine_proxies': ('stage2/fine_proxies.bin', 'train-stage2'),
    'static_mapper': ('ranker/v2_mlp_map/static_mapper.ckpt', 'train-ranker'),
    'generated_proxies': ('proxies/generated.bin', 'gen-proxies'),
}

HEADER_LEN = struct.Struct('<Q')


def ranker_artifact(variant: str) -> str:
    return f"ranker/{variant}"


def file_sha256(path: str) -> str:
    """sha256 of a file, or of every file below a directory in sorted order."""
    digest = hashlib.sha256()
    paths = [path]
    if os.path.isdir(path):
        paths = sorted(os.path.join(root, name) for root, _, names in os.walk(path) for name in names)
    for file_path in paths:
        if os.path.isdir(path):
            digest.update(os.path.relpath(file_path, path).encode())
        with open(file_path, 'rb') as f:
            for block in iter(lambda: f.read(1 << 20), b''):
                digest.update(block)
    return digest.hexdigest()


def tensor_hash(tensors: Dict[str, np.ndarray]) -> str:
    """sha256 over sorted names, shapes and little-endian float64 bytes."""
    digest = hashlib.sha256()
    for name in sorted(tensors):
        value = np.ascontiguousarray(tensors[name], dtype='<f8')
        digest.update(name.encode())
        digest.update(json.dumps(list(value.shape)).encode())
        digest.update(value.tobytes())
    return digest.hexdigest()


def save_tensors(path: str, tensors: Dict[str, np.ndarray], config_hash: str = '',
                 meta: Optional[Dict[str, Any]] = None) -> str:
    """
    Write a flat named-tensor checkpoint.

    Layout: 8-byte little-endian header length, JSON header (names, shapes,
    dtypes, config_hash, meta), then each tensor's raw little-endian bytes in
    header order. Identical inputs give identical bytes.

    Returns:
        sha256 of the written file
    """
    names = sorted(tensors)
    arrays = []
    entries = []
    for name in names:
        value = np.asarray(tensors[name])
        dtype = '<i8' if np.issubdtype(value.dtype, np.integer) else '<f8'
        value = np.ascontiguousarray(value, dtype=dtype)
        arrays.append(value)
        entries.append({'name': name, 'shape': list(value.shape), 'dtype': dtype})
    header = json.dumps({'tensors': entries, 'config_hash': config_hash, 'meta': meta or {}},
                        sort_keys=True, separators=(',', ':')).encode('utf-8')

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp_path = path + '.tmp'
    digest = hashlib.sha256()
    with open(tmp_path, 'wb') as f:
        for chunk in [HEADER_LEN.pack(len(header)), header] + [a.tobytes() for a in arrays]:
            f.write(chunk)
            digest.update(chunk)
    os.replace(tmp_path, path)
    return digest.hexdigest()


def load_tensors(path: str) -> Tuple[Dict[str, np.ndarray], str, Dict[str, Any]]:
    """
    Read a checkpoint written by save_tensors.

    Returns:
        (name -> array, config_hash, meta)
    """
    with open(path, 'rb') as f:
        raw = f.read()
    if len(raw) < HEADER_LEN.size:
        raise PreconditionError(f"truncated checkpoint: {path}")
    (header_len,) = HEADER_LEN.unpack_from(raw, 0)
    offset = HEADER_LEN.size + header_len
    try:
        header = json.loads(raw[HEADER_LEN.size:offset].decode('utf-8'))
    except ValueError as e:
        raise PreconditionError(f"corrupt checkpoint header: {path}") from e
    tensors = {}
    for entry in header['tensors']:
        dtype = np.dtype(entry['dtype'])
        count = int(np.prod(entry['shape'], dtype=np.int64))
        if offset + count * dtype.itemsize > len(raw):
            raise PreconditionError(f"checkpoint size mismatch: {path}")
        value = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
        tensors[entry['name']] = value.reshape(entry['shape']).astype(dtype.newbyteorder('='))
        offset += count * dtype.itemsize
    if offset != len(raw):
        raise PreconditionError(f"checkpoint size mismatch: {path}")
    return tensors, header.get('config_hash', ''), header.get('meta', {})


class ArtifactInfo:
    """Represents artifact metadata."""

    def __init__(self, name: str, path: str, producer: str, sha256: str,
                 config_hash: str = '', timestamp: Optional[float] = None,
                 description: str = ''):
        self.name = name
        self.path = path
        self.producer = producer
        self.sha256 = sha256
        self.config_hash = config_hash
        self.timestamp = timestamp if timestamp is not None else time.time()
        self.description = description

    def to_dict(self) -> Dict:
        """Convert to dictionary for JSON serialization."""
        return {
            'name': self.name,
            'path': self.path,
            'producer': self.producer,
            'sha256': self.sha256,
            'config_hash': self.config_hash,
            'timestamp': self.timestamp,
            'description': self.description,
        }

    @staticmethod
    def from_dict(data: Dict) -> 'ArtifactInfo':
        """Create ArtifactInfo from dictionary."""
        return ArtifactInfo(
            name=data['name'],
            path=data['path'],
            producer=data['producer'],
            sha256=data.get('sha256', ''),
            config_hash=data.get('config_hash', ''),
            timestamp=data.get('timestamp'),
            description=data.get('description', ''),
        )


class ArtifactManager:
    """Tracks artifacts of one working directory in artifacts.json."""

    def __init__(self, workdir: str):
        """
        Initialize ArtifactManager.

        Args:
            workdir: Pipeline working directory (created if missing)
        """
        self.workdir = workdir
        self.metadata_file = os.path.join(workdir, 'artifacts.json')
        os.makedirs(workdir, exist_ok=True)
        self.log_manager = LogManager()
        self.artifacts: Dict[str, ArtifactInfo] = self._load_metadata()

    def _load_metadata(self) -> Dict[str, ArtifactInfo]:
        """Load artifact metadata from JSON file."""
        if not os.path.exists(self.metadata_file):
            return {}
        try:
            with open(self.metadata_file, 'r', encoding='utf-8') as f:
                data = json.load(f)
            return {item['name']: ArtifactInfo.from_dict(item) for item in data}
        except (OSError, ValueError, KeyError) as e:
            self.log_manager.log_warning(f"Error loading artifact registry: {e}", category='ARTIFACT')
            return {}

    def _save_metadata(self):
        """Save artifact metadata to JSON file."""
        data = [self.artifacts[name].to_dict() for name in sorted(self.artifacts)]
        tmp_path = self.metadata_file + '.tmp'
        with open(tmp_path, 'w', encoding='utf-8') as f:
            json.dump(data, f, indent=2)
        os.replace(tmp_path, self.metadata_file)

    def path_for(self, name: str) -> str:
        """Absolute path where an artifact lives."""
        if name in ARTIFACT_LAYOUT:
            return os.path.join(self.workdir, ARTIFACT_LAYOUT[name][0])
        if name.startswith('ranker/'):
            return os.path.join(self.workdir, name, 'ranker.ckpt')
        raise PreconditionError(f"unknown artifact '{name}'")

    def producer_of(self, name: str) -> str:
        if name in ARTIFACT_LAYOUT:
            return ARTIFACT_LAYOUT[name][1]
        if name.startswith('ranker/'):
            return f"train-ranker --variant {name.split('/', 1)[1]}"
        return 'unknown'

    def register(self, name: str, config_hash: str = '', description: str = '') -> ArtifactInfo:
        """
        Record an artifact that has just been written.

        Args:
            name: Artifact name
            config_hash: Hash of the configuration that produced it
            description: Optional free text

        Returns:
            ArtifactInfo for the artifact
        """
        path = self.path_for(name)
        if not os.path.exists(path):
            self.log_manager.log_artifact('create', name, False, {'path': path})
            raise PreconditionError(f"artifact '{name}' was not written to {path}")
        info = ArtifactInfo(name=name, path=os.path.relpath(path, self.workdir),
                            producer=self.producer_of(name), sha256=file_sha256(path),
                            config_hash=config_hash, description=description)
        self.artifacts[name] = info
        self._save_metadata()
        self.log_manager.log_artifact('create', name, True,
                                      {'path': info.path, 'sha256': info.sha256})
        return info

    def exists(self, name: str) -> bool:
        return name in self.artifacts and os.path.exists(self.path_for(name))

    def require(self, name: str) -> str:
        """
        Path of an upstream artifact, or DependencyError naming its producer.
        """
        if not self.exists(name):
            self.log_manager.log_artifact('load', name, False, {'reason': 'missing'})
            raise DependencyError(name, self.producer_of(name))
        return self.path_for(name)

    def verify(self, name: str) -> bool:
        """True when the artifact's bytes still match the registry."""
        path = self.require(name)
        ok = file_sha256(path) == self.artifacts[name].sha256
        self.log_manager.log_artifact('verify', name, ok)
        if not ok:
            raise ArtifactMismatchError(f"artifact '{name}' changed since it was registered")
        return ok

    def list_artifacts(self) -> List[ArtifactInfo]:
        """All registered artifacts, newest first."""
        return sorted(self.artifacts.values(), key=lambda a: a.timestamp, reverse=True)

    def save_tensors(self, name: str, tensors: Dict[str, np.ndarray], config_hash: str = '',
                     meta: Optional[Dict[str, Any]] = None) -> ArtifactInfo:
        save_tensors(self.path_for(name), tensors, config_hash, meta)
        return self.register(name, config_hash)

    def load_tensors(self, name: str) -> Tuple[Dict[str, np.ndarray], str, Dict[str, Any]]:
        path = self.require(name)
        result = load_tensors(path)
        self.log_manager.log_artifact('load', name, True, {'path': path})
        return result

    def save_json(self, name: str, data: Dict[str, Any], config_hash: str = '') -> ArtifactInfo:
        path = self.path_for(name)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(data, f, indent=2, sort_keys=True)
        return self.register(name, config_hash)

    def load_json(self, name: str) -> Dict[str, Any]:
        with open(self.require(name), 'r', encoding='utf-8') as f:
            return json.load(f)
