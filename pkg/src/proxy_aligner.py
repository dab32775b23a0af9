"""
ProxyAligner - Coarse stage: align content proxies with the ranker's ID embeddings

Preprocesses the ID-embedding snapshot (frequency filter, l2 normalization),
trains encoder + phi with the in-batch contrastive proxy alignment loss, and
emits a unit-norm coarse proxy for every item, warm or cold.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np

from config_manager import EncoderConfig, Stage1Config
from content_encoder import ContentEncoder
from diff_kernels import AdamW, Kernel, Tensor, logsumexp, register_kernel, softmax
from errors import DegenerateInputError, EmptyTableError, PreconditionError, ShapeError
from log_manager import LogManager, progress

UNIT_NORM_TOLERANCE = 1e-3

ProxySource = Union[np.ndarray, Mapping[int, np.ndarray]]


@dataclass
class IdEmbeddingTable:
    """Preprocessed alignment targets: unit-norm rows keyed by item id (sorted)."""

    item_ids: np.ndarray
    vectors: np.ndarray
    tau: int
    n_filtered: int = 0

    def __post_init__(self):
        self._index = {int(i): row for row, i in enumerate(self.item_ids)}

    def __len__(self) -> int:
        return len(self.item_ids)

    def __contains__(self, item_id: int) -> bool:
        return int(item_id) in self._index

    def lookup(self, item_id: int) -> np.ndarray:
        return self.vectors[self._index[int(item_id)]]

    def rows(self, item_ids: Sequence[int]) -> np.ndarray:
        return self.vectors[[self._index[int(i)] for i in item_ids]]


def preprocess_id_table(raw: Mapping[int, Tuple[np.ndarray, int]], tau: int) -> IdEmbeddingTable:
    """
    Drop rarely updated items and l2-normalize the survivors.

    Args:
        raw: item_id -> (e_raw, update_count)
        tau: Minimum update count for an item to become a target

    Returns:
        IdEmbeddingTable of the items with update_count >= tau
    """
    if not raw:
        raise PreconditionError('preprocess_id_table: empty ID table')
    kept = sorted(int(i) for i, (_, count) in raw.items() if count >= tau)
    if not kept:
        raise EmptyTableError(f"every one of {len(raw)} items has fewer than {tau} updates")
    vectors = np.stack([np.asarray(raw[i][0], dtype=np.float64) for i in kept])
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    zero = np.nonzero(norms[:, 0] <= 0.0)[0]
    if zero.size:
        raise DegenerateInputError('preprocess_id_table: zero-norm ID embedding',
                                   item_ids=[kept[r] for r in zero])
    return IdEmbeddingTable(item_ids=np.asarray(kept, dtype=np.int64), vectors=vectors / norms,
                            tau=tau, n_filtered=len(raw) - len(kept))


def _check_unit_rows(name: str, x: np.ndarray):
    deviation = np.abs(np.linalg.norm(x, axis=1) - 1.0)
    if np.any(deviation > UNIT_NORM_TOLERANCE):
        bad = np.nonzero(deviation > UNIT_NORM_TOLERANCE)[0].tolist()
        raise PreconditionError(f"pal_loss: rows of {name} are not unit norm: {bad[:10]}")


def pal_loss(H: np.ndarray, E: np.ndarray, temperature: float) -> float:
    """
    In-batch contrastive alignment loss, proxy -> ID direction.

    mean_i [ logsumexp_j(h_i . e_j / t) - h_i . e_i / t ]

    Args:
        H: Proxies [B, d], unit rows
        E: ID targets [B, d], unit rows (constants)
        temperature: t > 0

    Returns:
        Scalar loss >= 0
    """
    if H.ndim != 2 or H.shape != E.shape or H.shape[0] < 1:
        raise ShapeError('pal_loss', H.shape, E.shape)
    if temperature <= 0:
        raise PreconditionError('pal_loss: temperature must be > 0')
    _check_unit_rows('H', H)
    _check_unit_rows('E', E)
    S = H @ E.T / temperature
    return float(np.mean(logsumexp(S, axis=1) - np.diag(S)))


def pal_loss_backward(H: np.ndarray, E: np.ndarray, temperature: float) -> np.ndarray:
    """d pal_loss / d H; targets get no gradient."""
    S = H @ E.T / temperature
    g_S = (softmax(S, axis=1) - np.eye(H.shape[0])) / H.shape[0]
    return g_S @ E / temperature


@register_kernel('pal_loss')
class PalLossKernel(Kernel):
    def __init__(self, temperature: float = 0.07):
        self.temperature = temperature

    def forward(self, H, E):
        self.H, self.E = H, E
        return np.asarray(pal_loss(H, E, self.temperature))

    def backward(self, grad):
        return [float(grad) * pal_loss_backward(self.H, self.E, self.temperature), None]


@dataclass
class Stage1Result:
    """Trained encoder, its pre-training snapshot, and proxies for every item."""

    encoder: ContentEncoder
    initial_encoder: ContentEncoder
    coarse: np.ndarray
    loss_history: List[float] = field(default_factory=list)


def train_stage1(corpus, id_table: IdEmbeddingTable, cfg: Stage1Config,
                 encoder_config: EncoderConfig) -> Stage1Result:
    """
    Jointly train encoder and phi on warm items that have ID targets.

    Args:
        corpus: Corpus providing item content
        id_table: Preprocessed targets (only these items participate)
        cfg: Stage-1 hyperparameters
        encoder_config: Architecture of the encoder to train from scratch

    Returns:
        Stage1Result whose coarse matrix is indexed by item id
    """
    cfg.validate()
    log_manager = LogManager()
    encoder = ContentEncoder(encoder_config)
    initial = encoder.copy()
    prompts = [encoder.build_prompt(item) for item in corpus.items]

    target_ids = np.asarray(id_table.item_ids, dtype=np.int64)
    n_targets = len(target_ids)
    batch_size = cfg.batch_size
    if batch_size > n_targets:
        log_manager.log_warning(
            f"stage1 batch_size {batch_size} exceeds {n_targets} warm items with targets; using {n_targets}",
            category='TRAINING', details={'requested': batch_size, 'used': n_targets})
        batch_size = n_targets

    tensors = {name: Tensor(value) for name, value in encoder.params.items()}
    # Tensor keeps the encoder's arrays, so updates land in encoder.params
    encoder.params = {name: t.data for name, t in tensors.items()}
    optimizer = AdamW(tensors, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)

    history: List[float] = []
    for epoch in progress(range(1, cfg.epochs + 1), desc='stage1'):
        order = rng.permutation(n_targets)
        losses = []
        for start in range(0, n_targets, batch_size):
            chunk = target_ids[order[start:start + batch_size]]
            if len(chunk) < 2 and n_targets >= 2:
                continue
            ids, patches = encoder.prompt_arrays([prompts[i] for i in chunk])
            h, cache = encoder.forward_chain(ids, patches, item_ids=chunk.tolist())
            E = id_table.rows(chunk)
            losses.append(pal_loss(h, E, cfg.temperature))
            grads = encoder.backward_chain(cache, pal_loss_backward(h, E, cfg.temperature))
            optimizer.zero_grad()
            for name, grad in grads.items():
                tensors[name].grad = grad
            optimizer.step()
        epoch_loss = float(np.mean(losses)) if losses else 0.0
        history.append(epoch_loss)
        log_manager.log_epoch('stage1', epoch, epoch_loss, {'batch_size': batch_size})

    _, coarse = encoder.embed_items(prompts)
    return Stage1Result(encoder=encoder, initial_encoder=initial, coarse=coarse, loss_history=history)


def _proxy_rows(proxies: ProxySource, item_ids: Sequence[int]) -> np.ndarray:
    if isinstance(proxies, np.ndarray):
        return proxies[np.asarray(item_ids, dtype=np.int64)]
    missing = [int(i) for i in item_ids if int(i) not in proxies]
    if missing:
        raise PreconditionError(f"no proxy for items {missing[:10]}")
    return np.stack([np.asarray(proxies[int(i)], dtype=np.float64) for i in item_ids])


def _target_ranks(proxies: ProxySource, id_table: IdEmbeddingTable) -> np.ndarray:
    """Rank of each item's own target among all targets, by (-similarity, item id)."""
    P = _proxy_rows(proxies, id_table.item_ids)
    S = P @ id_table.vectors.T
    own = np.diag(S)[:, None]
    ids = id_table.item_ids
    beats = (S > own) | ((S == own) & (ids[None, :] < ids[:, None]))
    return beats.sum(axis=1)


def retrieval_eval(proxies: ProxySource, id_table: IdEmbeddingTable, k: int = 1) -> float:
    """
    Fraction of target items whose own ID embedding is among the k nearest to their proxy.

    Args:
        proxies: Matrix indexed by item id, or item_id -> vector
        id_table: Preprocessed targets
        k: Neighbourhood size, 1 <= k <= len(id_table)

    Returns:
        Top-k accuracy in [0, 1]
    """
    if k < 1 or k > len(id_table):
        raise PreconditionError(f"retrieval_eval: k={k} outside [1, {len(id_table)}]")
    return float(np.mean(_target_ranks(proxies, id_table) < k))


def alignment_metrics(proxies: ProxySource, id_table: IdEmbeddingTable,
                      ks: Sequence[int] = (1, 5, 10)) -> Dict[str, float]:
    """Top-k retrieval accuracies and mean cosine(proxy, target) over target items."""
    ranks = _target_ranks(proxies, id_table)
    metrics = {f"top{k}": float(np.mean(ranks < k)) for k in ks if k <= len(id_table)}
    P = _proxy_rows(proxies, id_table.item_ids)
    cos = np.sum(P * id_table.vectors, axis=1) / np.maximum(np.linalg.norm(P, axis=1), 1e-12)
    metrics['mean_cosine'] = float(np.mean(cos))
    metrics['n_targets'] = int(len(id_table))
    return metrics
