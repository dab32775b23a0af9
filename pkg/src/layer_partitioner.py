"""
LayerPartitioner - k-means over encoder layers and the pooled-state cache

Groups the encoder's layers into shallow/middle/deep subgroups from probe-set
statistics, picks one representative layer per group, and caches the pooled
states of those layers for every item (the encoder is frozen from here on).
"""
import hashlib
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from content_encoder import ContentEncoder
from errors import ConfigurationError, PreconditionError, ShapeError

MIN_PROBE_ITEMS = 32


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia_trace: List[float]
    n_iter: int


def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.sum(diff * diff, axis=2)


def _kmeans_plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    for _ in range(1, k):
        d2 = _squared_distances(points, points[chosen]).min(axis=1)
        total = d2.sum()
        if total <= 0.0:
            remaining = np.setdiff1d(np.arange(n), chosen)
            chosen.append(int(rng.choice(remaining)))
        else:
            chosen.append(int(rng.choice(n, p=d2 / total)))
    return points[chosen].copy()


def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iters: int = 100) -> KMeansResult:
    """
    Lloyd's algorithm with k-means++ seeding.

    The trace holds J(a_t, c_{t-1}) for each assignment step, which cannot
    increase. An empty cluster is re-seeded at the point farthest from its
    own centroid.

    Args:
        points: [n, dim] data
        k: Number of clusters, 1 <= k <= n
        seed: Seed for the k-means++ draw
        max_iters: Upper bound on assignment steps

    Returns:
        KMeansResult
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ShapeError('kmeans', points.shape)
    n = points.shape[0]
    if k < 1 or n < k:
        raise PreconditionError(f"kmeans: need 1 <= k <= n_points, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_plus_plus(points, k, rng)
    assignments = None
    trace: List[float] = []
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        d2 = _squared_distances(points, centroids)
        new = np.argmin(d2, axis=1)
        own = d2[np.arange(n), new]
        trace.append(float(own.sum()))
        if assignments is not None and np.array_equal(new, assignments):
            break
        assignments = new
        counts = np.bincount(assignments, minlength=k)
        taken = set()
        for j in range(k):
            if counts[j] > 0:
                centroids[j] = points[assignments == j].mean(axis=0)
                continue
            for idx in np.argsort(-own, kind='stable'):
                if int(idx) not in taken:
                    taken.add(int(idx))
                    centroids[j] = points[idx]
                    break
    return KMeansResult(assignments=assignments, centroids=centroids, inertia_trace=trace, n_iter=n_iter)


@dataclass
class LayerPartition:
    """Representative layer per subgroup plus the clustering of all layers."""

    layers: Tuple[int, ...]
    assignments: List[int]
    probe_hash: str
    seed: int
    inertia_trace: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            'layers': list(self.layers),
            'assignments': list(self.assignments),
            'probe_hash': self.probe_hash,
            'seed': self.seed,
            'inertia_trace': list(self.inertia_trace),
        }

    @staticmethod
    def from_dict(data: Dict) -> 'LayerPartition':
        return LayerPartition(layers=tuple(int(x) for x in data['layers']),
                              assignments=[int(a) for a in data['assignments']],
                              probe_hash=data['probe_hash'], seed=int(data['seed']),
                              inertia_trace=[float(x) for x in data.get('inertia_trace', [])])


def probe_hash(item_ids: Sequence[int]) -> str:
    joined = ','.join(str(i) for i in sorted(int(i) for i in item_ids))
    return hashlib.sha256(joined.encode()).hexdigest()


def layer_features(encoder: ContentEncoder, probe_items: Sequence) -> np.ndarray:
    """Probe-set mean of pool_g(H^(l)) for l = 1..L: [L, D]."""
    items = sorted(probe_items, key=lambda item: item.item_id)
    prompts = [encoder.build_prompt(item) for item in items]
    layers = list(range(1, encoder.config.n_layers + 1))
    return encoder.pooled_layers(prompts, layers).mean(axis=0)


def _nearest_layer(features: np.ndarray, candidates: np.ndarray, centroid: np.ndarray) -> int:
    """1-based layer among candidates closest to centroid; ties keep the lowest layer."""
    dist = np.sum((features[candidates] - centroid) ** 2, axis=1)
    return int(candidates[np.argmin(dist)]) + 1


def partition_layers(encoder: ContentEncoder, probe_items: Sequence, k: int = 3,
                     seed: int = 0, max_iters: int = 100) -> LayerPartition:
    """
    Cluster the encoder's layers and keep each cluster's medoid layer.

    Args:
        encoder: Stage-1 encoder
        probe_items: At least 32 items; order does not matter
        k: Number of subgroups
        seed: k-means seed
        max_iters: k-means iteration bound

    Returns:
        LayerPartition with ascending layer indices in [1, L]
    """
    L = encoder.config.n_layers
    if L < k:
        raise ConfigurationError('encoder.n_layers', f"needs at least {k} layers, got {L}")
    if len(probe_items) < MIN_PROBE_ITEMS:
        raise PreconditionError(f"partition_layers: {len(probe_items)} probe items, need >= {MIN_PROBE_ITEMS}")
    signature = probe_hash([item.item_id for item in probe_items])
    if L == k:
        return LayerPartition(layers=tuple(range(1, L + 1)), assignments=list(range(L)),
                              probe_hash=signature, seed=seed)

    features = layer_features(encoder, probe_items)
    result = kmeans(features, k, seed=seed, max_iters=max_iters)
    medoids: Dict[int, int] = {}
    for j in range(k):
        members = np.nonzero(result.assignments == j)[0]
        if members.size:
            medoids[j] = _nearest_layer(features, members, result.centroids[j])
    for j in range(k):
        if j not in medoids:
            # cluster left empty at max_iters
            free = np.array([i for i in range(L) if i + 1 not in medoids.values()])
            medoids[j] = _nearest_layer(features, free, result.centroids[j])
    return LayerPartition(layers=tuple(sorted(medoids.values())), assignments=result.assignments.tolist(),
                          probe_hash=signature, seed=seed, inertia_trace=result.inertia_trace)


@dataclass
class PooledCache:
    """pool_g of the partition's layers for every item: states[item_id] is [3, D]."""

    states: np.ndarray
    layers: Tuple[int, ...]
    encoder_hash: str

    def to_tensors(self) -> Dict[str, np.ndarray]:
        return {'states': self.states, 'layers': np.asarray(self.layers, dtype=np.int64)}

    @staticmethod
    def from_tensors(tensors: Dict[str, np.ndarray], encoder_hash: str) -> 'PooledCache':
        return PooledCache(states=tensors['states'],
                           layers=tuple(int(x) for x in tensors['layers']),
                           encoder_hash=encoder_hash)


def build_pooled_cache(encoder: ContentEncoder, items: Sequence,
                       partition: LayerPartition) -> PooledCache:
    """Pooled states of the selected layers, rows ordered by item id."""
    ordered = sorted(items, key=lambda item: item.item_id)
    ids = [item.item_id for item in ordered]
    if ids != list(range(len(ids))):
        raise PreconditionError('build_pooled_cache: item ids must be 0..n-1')
    prompts = [encoder.build_prompt(item) for item in ordered]
    states = encoder.pooled_layers(prompts, partition.layers)
    return PooledCache(states=states, layers=tuple(partition.layers),
                       encoder_hash=encoder.parameter_hash())
