"""
Metrics - AUC, 2-D projection of embedding tables and cluster diagnostics
"""
import io
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata
from sklearn.metrics import silhouette_score

from errors import DegenerateProjectionError, PreconditionError, ShapeError, UndefinedMetricError
from layer_partitioner import kmeans

RANK_FLOOR = 1e-12


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    Area under the ROC curve, P(score+ > score-) + 0.5 P(tie).

    Uses the rank-sum form with average ranks for ties, O(n log n).

    Args:
        scores: Real-valued scores
        labels: 0/1 labels of the same length

    Returns:
        AUC in [0, 1]
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ShapeError('auc', s.shape, y.shape)
    if not np.all((y == 0) | (y == 1)):
        raise PreconditionError('auc: labels must be 0 or 1')
    n_pos = int(np.sum(y == 1))
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"auc: needs both classes, got {n_pos} positives and {n_neg} negatives")
    ranks = rankdata(s, method='average')
    rank_sum = float(np.sum(ranks[y == 1]))
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass
class Projection:
    """2-D coordinates of an embedding table, one row per item."""

    item_ids: np.ndarray
    coords: np.ndarray
    topic_ids: np.ndarray
    explained_variance: np.ndarray

    def to_csv(self) -> str:
        buffer = io.StringIO()
        buffer.write('item_id,x,y,topic_id\n')
        for item_id, (x, y), topic in zip(self.item_ids, self.coords, self.topic_ids):
            buffer.write(f"{int(item_id)},{float(x)!r},{float(y)!r},{int(topic)}\n")
        return buffer.getvalue()

    def write_csv(self, path: str) -> str:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'w', encoding='utf-8', newline='') as f:
            f.write(self.to_csv())
        return path


def project_2d(vectors: np.ndarray, item_ids: Optional[Sequence[int]] = None,
               topic_ids: Optional[Sequence[int]] = None) -> Projection:
    """
    Top-two principal components with a deterministic sign.

    Each component is flipped so that its largest-magnitude loading is
    positive (first such coordinate on ties).

    Args:
        vectors: [n, dim] embeddings, n >= 3
        item_ids: Row labels (default 0..n-1)
        topic_ids: Topic per row (default -1)

    Returns:
        Projection
    """
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError('project_2d', X.shape)
    n = X.shape[0]
    if n < 3:
        raise PreconditionError(f"project_2d: needs at least 3 vectors, got {n}")
    centered = X - X.mean(axis=0, keepdims=True)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s.size < 2 or s[0] <= 0.0 or s[1] <= RANK_FLOOR * s[0]:
        raise DegenerateProjectionError(f"project_2d: embedding set has rank < 2 (n={n})")
    components = vt[:2].copy()
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    ids = np.arange(n) if item_ids is None else np.asarray(item_ids, dtype=np.int64)
    topics = np.full(n, -1) if topic_ids is None else np.asarray(topic_ids, dtype=np.int64)
    return Projection(item_ids=ids, coords=centered @ components.T, topic_ids=topics,
                      explained_variance=(s[:2] ** 2) / max(n - 1, 1))


def cluster_silhouette(points: np.ndarray, k: int = 3, seed: int = 0) -> float:
    """Silhouette of a k-means clustering; near 1 for tight, separated groups."""
    result = kmeans(points, k, seed=seed)
    if len(np.unique(result.assignments)) < 2:
        return 0.0
    return float(silhouette_score(points, result.assignments))
