"""
CorpusGenerator - Synthetic multimodal recommendation corpus with planted structure

Items carry a latent factor that drives clicks. Their content (topic-conditioned
text tokens plus projected "image" patches) carries that factor imperfectly, so
content genuinely predicts clicks while cold-start stays non-trivial. The
generator also plants the production ID-embedding snapshot the alignment stage
targets, in a clustered or irregular geometry.
"""
import hashlib
import json
import os
from collections import deque
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from config_manager import GenConfig, config_hash
from errors import ConfigurationError, EmptySplitError, PreconditionError

N_GENRES = 3
N_HOUR_BUCKETS = 4
N_DEVICE_BUCKETS = 2
N_SCALARS = N_HOUR_BUCKETS + N_DEVICE_BUCKETS
TOPIC_TOKEN_SHARE = 0.8
EVAL_COLD_SHARE = 0.5
PATCH_NOISE = 0.1
CONTEXT_WEIGHT_STD = 0.15
USER_LATENT_STD = 0.55

# (genre radius, topic offset, item noise, ID-table noise) per geometry
ID_SPACE_GEOMETRY = {
    'clustered': (4.0, 1.0, 0.35, 0.05),
    'irregular': (0.0, 0.3, 1.1, 0.6),
}


@dataclass
class Item:
    """One item with its planted latent factor and synthetic multimodal content."""

    item_id: int
    topic_id: int
    latent: np.ndarray
    content_tokens: np.ndarray
    image_patches: np.ndarray
    is_cold: bool
    creation_time: int = 0

    def to_dict(self) -> Dict:
        return {
            'item_id': self.item_id,
            'topic_id': self.topic_id,
            'latent': _reals(self.latent),
            'content_tokens': [int(t) for t in self.content_tokens],
            'image_patches': [_reals(row) for row in self.image_patches],
            'is_cold': self.is_cold,
            'creation_time': self.creation_time,
        }

    @staticmethod
    def from_dict(data: Dict) -> 'Item':
        return Item(
            item_id=int(data['item_id']),
            topic_id=int(data['topic_id']),
            latent=_parse_reals(data['latent']),
            content_tokens=np.asarray(data['content_tokens'], dtype=np.int64),
            image_patches=np.stack([_parse_reals(row) for row in data['image_patches']]),
            is_cold=bool(data['is_cold']),
            creation_time=int(data.get('creation_time', data['item_id'])),
        )


@dataclass
class ContextFeatures:
    """Click history (oldest first) and bucketed context scalars."""

    history: np.ndarray
    scalars: np.ndarray


@dataclass
class Interaction:
    """A single user-item impression with its click label."""

    interaction_id: int
    user_id: int
    item_id: int
    timestamp: int
    context: ContextFeatures
    label: int
    click_prob: float = 0.5


class InteractionSet:
    """Columnar set of interactions; histories padded with -1."""

    def __init__(self, interaction_id: np.ndarray, user_id: np.ndarray, item_id: np.ndarray,
                 timestamp: np.ndarray, label: np.ndarray, history: np.ndarray,
                 scalars: np.ndarray, click_prob: Optional[np.ndarray] = None):
        self.interaction_id = np.asarray(interaction_id, dtype=np.int64)
        self.user_id = np.asarray(user_id, dtype=np.int64)
        self.item_id = np.asarray(item_id, dtype=np.int64)
        self.timestamp = np.asarray(timestamp, dtype=np.int64)
        self.label = np.asarray(label, dtype=np.int64)
        self.history = np.asarray(history, dtype=np.int64).reshape(len(self.item_id), -1)
        self.scalars = np.asarray(scalars, dtype=np.float64).reshape(len(self.item_id), -1)
        if click_prob is None:
            click_prob = np.full(len(self.item_id), np.nan)
        self.click_prob = np.asarray(click_prob, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.interaction_id)

    def __getitem__(self, index: int) -> Interaction:
        hist = self.history[index]
        return Interaction(
            interaction_id=int(self.interaction_id[index]),
            user_id=int(self.user_id[index]),
            item_id=int(self.item_id[index]),
            timestamp=int(self.timestamp[index]),
            context=ContextFeatures(history=hist[hist >= 0].copy(),
                                    scalars=self.scalars[index].copy()),
            label=int(self.label[index]),
            click_prob=float(self.click_prob[index]),
        )

    def __iter__(self) -> Iterator[Interaction]:
        for i in range(len(self)):
            yield self[i]

    @property
    def history_mask(self) -> np.ndarray:
        return self.history >= 0

    def subset(self, mask_or_index: np.ndarray) -> 'InteractionSet':
        idx = np.asarray(mask_or_index)
        return InteractionSet(self.interaction_id[idx], self.user_id[idx], self.item_id[idx],
                              self.timestamp[idx], self.label[idx], self.history[idx],
                              self.scalars[idx], self.click_prob[idx])

    @staticmethod
    def union(*sets: 'InteractionSet') -> 'InteractionSet':
        """Concatenate sets and order the result by timestamp."""
        merged = InteractionSet(
            np.concatenate([s.interaction_id for s in sets]),
            np.concatenate([s.user_id for s in sets]),
            np.concatenate([s.item_id for s in sets]),
            np.concatenate([s.timestamp for s in sets]),
            np.concatenate([s.label for s in sets]),
            np.concatenate([s.history for s in sets]),
            np.concatenate([s.scalars for s in sets]),
            np.concatenate([s.click_prob for s in sets]),
        )
        return merged.subset(np.argsort(merged.timestamp, kind='stable'))


@dataclass
class Corpus:
    """Generated corpus: items, users, interactions and the planted ID snapshot."""

    config: GenConfig
    items: List[Item]
    user_latents: np.ndarray
    interactions: InteractionSet
    train_cutoff: int
    id_raw: np.ndarray
    update_counts: np.ndarray
    context_weights: np.ndarray

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def n_users(self) -> int:
        return self.user_latents.shape[0]

    @property
    def cold_mask(self) -> np.ndarray:
        return np.array([item.is_cold for item in self.items], dtype=bool)

    @property
    def item_latents(self) -> np.ndarray:
        return np.stack([item.latent for item in self.items])

    @property
    def topic_ids(self) -> np.ndarray:
        return np.array([item.topic_id for item in self.items], dtype=np.int64)

    def warm_item_ids(self) -> np.ndarray:
        return np.nonzero(~self.cold_mask)[0]

    def cold_item_ids(self) -> np.ndarray:
        return np.nonzero(self.cold_mask)[0]

    def raw_id_entries(self) -> Dict[int, Tuple[np.ndarray, int]]:
        """item_id -> (e_raw, update_count), the input of ID-table preprocessing."""
        return {i: (self.id_raw[i].copy(), int(self.update_counts[i])) for i in range(self.n_items)}

    def content_hash(self) -> str:
        digest = hashlib.sha256()
        digest.update(config_hash(self.config).encode())
        for arr in (self.item_latents, self.user_latents, self.id_raw, self.update_counts,
                    self.interactions.item_id, self.interactions.user_id, self.interactions.label):
            digest.update(np.ascontiguousarray(arr).tobytes())
        return digest.hexdigest()


def _reals(values: np.ndarray) -> List[str]:
    # repr is the shortest string that round-trips a 64-bit float
    return [repr(float(v)) for v in np.asarray(values).ravel()]


def _parse_reals(values: List[str]) -> np.ndarray:
    return np.asarray([float(v) for v in values], dtype=np.float64)


def _item_latents(config: GenConfig, rng: np.random.Generator,
                  topic_ids: np.ndarray) -> np.ndarray:
    genre_radius, topic_offset, item_noise, _ = ID_SPACE_GEOMETRY[config.id_space_mode]
    d = config.d_latent
    genre_dirs = rng.standard_normal((N_GENRES, d))
    genre_dirs /= np.linalg.norm(genre_dirs, axis=1, keepdims=True)
    topic_dirs = rng.standard_normal((config.n_topics, d)) / np.sqrt(d)
    topic_centers = genre_radius * genre_dirs[np.arange(config.n_topics) % N_GENRES] \
        + topic_offset * topic_dirs
    latents = topic_centers[topic_ids] + item_noise * rng.standard_normal((config.n_items, d))
    # centred so that no user prefers the catalogue as a whole
    return latents - latents.mean(axis=0, keepdims=True)


def _content_tokens(config: GenConfig, rng: np.random.Generator,
                    topic_ids: np.ndarray) -> np.ndarray:
    topic_dists = rng.dirichlet(np.full(config.vocab_size, 0.05), size=config.n_topics)
    tokens = np.empty((config.n_items, config.tokens_per_item), dtype=np.int64)
    from_topic = rng.random((config.n_items, config.tokens_per_item)) < TOPIC_TOKEN_SHARE
    uniform = rng.integers(0, config.vocab_size, size=(config.n_items, config.tokens_per_item))
    for i in range(config.n_items):
        topical = rng.choice(config.vocab_size, size=config.tokens_per_item, p=topic_dists[topic_ids[i]])
        tokens[i] = np.where(from_topic[i], topical, uniform[i])
    return tokens


def _image_patches(config: GenConfig, rng: np.random.Generator, latents: np.ndarray) -> np.ndarray:
    width = config.n_patches * config.d_patch
    projection = rng.standard_normal((width, config.d_latent)) / np.sqrt(config.d_latent)
    flat = latents @ projection.T + PATCH_NOISE * rng.standard_normal((config.n_items, width))
    return flat.reshape(config.n_items, config.n_patches, config.d_patch)


def _histories(user_ids: np.ndarray, item_ids: np.ndarray, labels: np.ndarray,
               n_users: int, history_len: int) -> np.ndarray:
    """Clicked items of the same user at strictly earlier timestamps, oldest first."""
    history = np.full((len(user_ids), history_len), -1, dtype=np.int64)
    recent = [deque(maxlen=history_len) for _ in range(n_users)]
    for n in range(len(user_ids)):
        past = recent[user_ids[n]]
        if past:
            history[n, :len(past)] = list(past)
        if labels[n]:
            past.append(int(item_ids[n]))
    return history


def generate_corpus(config: GenConfig) -> Corpus:
    """
    Generate a corpus deterministically from its config.

    Args:
        config: Generation parameters (validated here)

    Returns:
        Corpus whose cold items (the newest cold_fraction) only appear after
        the training cutoff and whose warm items each have at least one
        training interaction
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    n_items, n_users = config.n_items, config.n_users
    n_cold = config.n_cold_items
    n_warm = n_items - n_cold

    topic_ids = rng.integers(0, config.n_topics, size=n_items)
    latents = _item_latents(config, rng, topic_ids)
    tokens = _content_tokens(config, rng, topic_ids)
    patches = _image_patches(config, rng, latents)
    user_latents = USER_LATENT_STD * rng.standard_normal((n_users, config.d_latent))
    context_weights = CONTEXT_WEIGHT_STD * rng.standard_normal(N_SCALARS)
    popularity = rng.lognormal(0.0, 1.0, size=n_items)

    # item ids are creation order; the newest n_cold items are cold
    is_cold = np.arange(n_items) >= n_warm
    warm_ids = np.arange(n_warm)
    cold_ids = np.arange(n_warm, n_items)

    n_total = config.n_interactions
    n_train = int(n_total * config.train_fraction)
    n_eval = n_total - n_train

    warm_p = popularity[warm_ids] / popularity[warm_ids].sum()
    cold_p = popularity[cold_ids] / popularity[cold_ids].sum()
    train_items = np.concatenate([
        rng.permutation(warm_ids),
        rng.choice(warm_ids, size=n_train - n_warm, p=warm_p),
    ])
    train_items = train_items[rng.permutation(n_train)]
    pick_cold = rng.random(n_eval) < EVAL_COLD_SHARE
    eval_items = np.where(pick_cold,
                          rng.choice(cold_ids, size=n_eval, p=cold_p),
                          rng.choice(warm_ids, size=n_eval, p=warm_p))
    item_ids = np.concatenate([train_items, eval_items]).astype(np.int64)
    user_ids = rng.integers(0, n_users, size=n_total)
    timestamps = np.arange(n_total, dtype=np.int64)

    hours = rng.integers(0, N_HOUR_BUCKETS, size=n_total)
    devices = rng.integers(0, N_DEVICE_BUCKETS, size=n_total)
    scalars = np.zeros((n_total, N_SCALARS))
    scalars[np.arange(n_total), hours] = 1.0
    scalars[np.arange(n_total), N_HOUR_BUCKETS + devices] = 1.0

    logits = np.einsum('nd,nd->n', user_latents[user_ids], latents[item_ids]) \
        + scalars @ context_weights \
        + config.noise_sigma * rng.standard_normal(n_total)
    click_prob = 1.0 / (1.0 + np.exp(-logits))
    labels = (rng.random(n_total) < click_prob).astype(np.int64)
    history = _histories(user_ids, item_ids, labels, n_users, config.history_len)

    update_counts = np.bincount(item_ids[:n_train], minlength=n_items).astype(np.int64)
    _, _, _, id_noise = ID_SPACE_GEOMETRY[config.id_space_mode]
    id_map = rng.standard_normal((config.d_id, config.d_latent)) / np.sqrt(config.d_latent)
    id_raw = latents @ id_map.T + id_noise * rng.standard_normal((n_items, config.d_id))
    # magnitude grows with popularity, as in a live ranker's table
    id_raw *= (0.5 + np.log1p(update_counts) / 3.0)[:, None]
    untrained = update_counts == 0
    id_raw[untrained] = 0.05 * rng.standard_normal((int(untrained.sum()), config.d_id))

    items = [
        Item(item_id=i, topic_id=int(topic_ids[i]), latent=latents[i], content_tokens=tokens[i],
             image_patches=patches[i], is_cold=bool(is_cold[i]), creation_time=i)
        for i in range(n_items)
    ]
    interactions = InteractionSet(np.arange(n_total), user_ids, item_ids, timestamps, labels,
                                  history, scalars, click_prob)
    return Corpus(config=config, items=items, user_latents=user_latents,
                  interactions=interactions, train_cutoff=n_train, id_raw=id_raw,
                  update_counts=update_counts, context_weights=context_weights)


def split_train_eval(corpus: Corpus) -> Tuple[InteractionSet, InteractionSet, InteractionSet]:
    """
    Split by the training cutoff, then route evaluation interactions by item temperature.

    Returns:
        (train, eval_warm, eval_cold)
    """
    inter = corpus.interactions
    cold = corpus.cold_mask[inter.item_id]
    in_train = inter.timestamp < corpus.train_cutoff
    if np.any(in_train & cold):
        raise PreconditionError('cold item found before the training cutoff')
    eval_cold_mask = ~in_train & cold
    if not np.any(eval_cold_mask):
        raise EmptySplitError('eval_cold is empty: no interaction involves a cold item')
    if not np.any(in_train):
        raise EmptySplitError('train split is empty')
    return (inter.subset(in_train), inter.subset(~in_train & ~cold), inter.subset(eval_cold_mask))


def day_windows(eval_set: InteractionSet, start: int, end: int, n_days: int) -> List[np.ndarray]:
    """Boolean masks cutting [start, end) into n_days equal timestamp windows."""
    edges = np.linspace(start, end, n_days + 1)
    return [(eval_set.timestamp >= edges[k]) & (eval_set.timestamp < edges[k + 1])
            if k < n_days - 1 else (eval_set.timestamp >= edges[k]) & (eval_set.timestamp <= end)
            for k in range(n_days)]


# ----------------------------------------------------------------------------
# Serialization
# ----------------------------------------------------------------------------

def _write_jsonl(path: str, rows: Iterator[Dict]):
    tmp_path = path + '.tmp'
    with open(tmp_path, 'w', encoding='utf-8') as f:
        for row in rows:
            f.write(json.dumps(row, separators=(',', ':')))
            f.write('\n')
    os.replace(tmp_path, path)


def _read_jsonl(path: str) -> Iterator[Dict]:
    with open(path, 'r', encoding='utf-8') as f:
        for line in f:
            line = line.strip()
            if line:
                yield json.loads(line)


def save_corpus(corpus: Corpus, directory: str) -> Dict:
    """
    Write the corpus directory (items/users/interactions/id_table JSONL + meta.json).

    Returns:
        The meta dictionary written to meta.json
    """
    os.makedirs(directory, exist_ok=True)
    _write_jsonl(os.path.join(directory, 'items.jsonl'), (item.to_dict() for item in corpus.items))
    _write_jsonl(os.path.join(directory, 'users.jsonl'),
                 ({'user_id': u, 'latent': _reals(corpus.user_latents[u])} for u in range(corpus.n_users)))

    inter = corpus.interactions

    def interaction_rows():
        for n in range(len(inter)):
            hist = inter.history[n]
            yield {
                'interaction_id': int(inter.interaction_id[n]),
                'user_id': int(inter.user_id[n]),
                'item_id': int(inter.item_id[n]),
                'timestamp': int(inter.timestamp[n]),
                'history': [int(h) for h in hist[hist >= 0]],
                'scalars': _reals(inter.scalars[n]),
                'label': int(inter.label[n]),
                'click_prob': repr(float(inter.click_prob[n])),
            }

    _write_jsonl(os.path.join(directory, 'interactions.jsonl'), interaction_rows())
    _write_jsonl(os.path.join(directory, 'id_table.jsonl'),
                 ({'item_id': i, 'e_raw': _reals(corpus.id_raw[i]),
                   'update_count': int(corpus.update_counts[i])} for i in range(corpus.n_items)))

    meta = {
        'config': {k: v for k, v in vars(corpus.config).items()},
        'config_hash': config_hash(corpus.config),
        'content_hash': corpus.content_hash(),
        'train_cutoff': corpus.train_cutoff,
        'context_weights': _reals(corpus.context_weights),
        'n_items': corpus.n_items,
        'n_users': corpus.n_users,
        'n_interactions': len(inter),
    }
    with open(os.path.join(directory, 'meta.json'), 'w', encoding='utf-8') as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    return meta


def load_corpus(directory: str) -> Corpus:
    """Read a corpus directory written by save_corpus."""
    meta_path = os.path.join(directory, 'meta.json')
    if not os.path.exists(meta_path):
        raise PreconditionError(f"not a corpus directory: {directory}")
    with open(meta_path, 'r', encoding='utf-8') as f:
        meta = json.load(f)
    try:
        config = GenConfig(**meta['config'])
    except TypeError as e:
        raise ConfigurationError('meta.config', str(e)) from e

    items = sorted((Item.from_dict(d) for d in _read_jsonl(os.path.join(directory, 'items.jsonl'))),
                   key=lambda item: item.item_id)
    users = sorted(_read_jsonl(os.path.join(directory, 'users.jsonl')), key=lambda d: d['user_id'])
    user_latents = np.stack([_parse_reals(u['latent']) for u in users])

    rows = list(_read_jsonl(os.path.join(directory, 'interactions.jsonl')))
    history = np.full((len(rows), config.history_len), -1, dtype=np.int64)
    for n, row in enumerate(rows):
        history[n, :len(row['history'])] = row['history']
    interactions = InteractionSet(
        [r['interaction_id'] for r in rows], [r['user_id'] for r in rows],
        [r['item_id'] for r in rows], [r['timestamp'] for r in rows],
        [r['label'] for r in rows], history,
        np.stack([_parse_reals(r['scalars']) for r in rows]),
        [float(r['click_prob']) for r in rows],
    )

    table = sorted(_read_jsonl(os.path.join(directory, 'id_table.jsonl')), key=lambda d: d['item_id'])
    id_raw = np.stack([_parse_reals(t['e_raw']) for t in table])
    update_counts = np.asarray([t['update_count'] for t in table], dtype=np.int64)
    return Corpus(config=config, items=items, user_latents=user_latents, interactions=interactions,
                  train_cutoff=int(meta['train_cutoff']), id_raw=id_raw, update_counts=update_counts,
                  context_weights=_parse_reals(meta['context_weights']))
