"""
CTRRanker - DIN-style click-through-rate model with proxy injection variants

Every variant shares one input layout: five d-wide fields
[user, item slot, attention summary, auxiliary content, fine field], a plain
d-wide block, the ten pairwise field dot products and the context scalars.
A variant only decides what flows into each field; unused fields stay zero,
so a variant whose proxy weights are zero computes exactly the base forward.

    base  item slot = e_i, history keys = e_h
    v1    aux = z_unaligned W_content
    v2    aux = static_map(z_unaligned) W_static
    v3    aux = p_coarse W_coarse
    v4    v3 + plain = p_fine W_fp
    v5    v3 + fine field = p_fine W_ff, and p_fine W_side added to the item
          slot and (per history item) to the attention keys
"""
import dataclasses
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from config_manager import RankerConfig, resolve_variant
from diff_kernels import (KINK_MARGIN, AdamW, Kernel, Tensor, binary_cross_entropy,
                          binary_cross_entropy_backward, kink_margin, masked_softmax, register_kernel,
                          relu, sigmoid, softmax_backward)
from errors import DegenerateInputError, PreconditionError, ProxyNotFoundError, ShapeError
from fine_adaptor import FineAdaptor
from log_manager import LogManager, progress

N_FIELDS = 5
FIELD_USER, FIELD_ITEM, FIELD_ATTENTION, FIELD_AUX, FIELD_FINE = range(N_FIELDS)
PROXY_WEIGHTS = ('W_content', 'W_static', 'W_coarse', 'W_fp', 'W_ff', 'W_side')
EMBEDDING_TABLES = ('user_emb', 'item_emb')

# variant -> (aux source, fine usage)
VARIANT_WIRING = {
    'base': (None, ()),
    'v1_content_feature': ('content', ()),
    'v2_mlp_map': ('static', ()),
    'v3_coarse': ('coarse', ()),
    'v4_concat_fine': ('coarse', ('plain',)),
    'v5_structure_reuse': ('coarse', ('field', 'side')),
}
AUX_WEIGHT = {'content': 'W_content', 'static': 'W_static', 'coarse': 'W_coarse'}


def _flat(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


# ----------------------------------------------------------------------------
# Building blocks
# ----------------------------------------------------------------------------

def target_attention(keys: np.ndarray, target: np.ndarray, mask: np.ndarray,
                     Wq: np.ndarray, Wk: np.ndarray, Wv: np.ndarray) -> Tuple[np.ndarray, Tuple]:
    """
    Candidate-as-query scaled dot-product attention over the history.

    Args:
        keys: History vectors [B, H, d]
        target: Candidate vectors [B, d]
        mask: Valid history positions [B, H]; an all-False row yields zeros

    Returns:
        (summary [B, d], backward cache)
    """
    if keys.ndim != 3 or keys.shape[0] != target.shape[0] or keys.shape[:2] != mask.shape:
        raise ShapeError('target_attention', keys.shape, target.shape, mask.shape)
    scale = 1.0 / np.sqrt(Wq.shape[1])
    q = target @ Wq
    k = keys @ Wk
    v = keys @ Wv
    weights = masked_softmax(np.einsum('bd,bhd->bh', q, k) * scale, mask)
    return np.einsum('bh,bhd->bd', weights, v), (keys, target, q, k, v, weights, scale)


def target_attention_backward(cache: Tuple, Wq: np.ndarray, Wk: np.ndarray, Wv: np.ndarray,
                              grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray, Dict[str, np.ndarray]]:
    """Returns (dL/dkeys, dL/dtarget, {att_Wq, att_Wk, att_Wv})."""
    keys, target, q, k, v, weights, scale = cache
    g_weights = np.einsum('bd,bhd->bh', grad, v)
    g_v = weights[..., None] * grad[:, None, :]
    g_scores = softmax_backward(weights, g_weights) * scale
    g_q = np.einsum('bh,bhd->bd', g_scores, k)
    g_k = g_scores[..., None] * q[:, None, :]
    grads = {
        'att_Wq': target.T @ g_q,
        'att_Wk': _flat(keys).T @ _flat(g_k),
        'att_Wv': _flat(keys).T @ _flat(g_v),
    }
    g_keys = g_k @ Wk.T + g_v @ Wv.T
    return g_keys, g_q @ Wq.T, grads


def pairwise_dots(fields: np.ndarray) -> np.ndarray:
    """Inner products of all field pairs (i < j) in row-major pair order: [B, F(F-1)/2]."""
    rows, cols = np.triu_indices(fields.shape[1], k=1)
    return np.einsum('bpd,bpd->bp', fields[:, rows], fields[:, cols])


def feature_interaction(fields: np.ndarray, scalars: np.ndarray, params: Dict[str, np.ndarray],
                        plain: Optional[np.ndarray] = None) -> Tuple[np.ndarray, Tuple]:
    """
    Concatenate fields, plain features, pairwise dots and scalars, then a two-layer ReLU MLP.

    Args:
        fields: [B, F, d], F >= 2
        scalars: [B, s]
        params: mlp_W1, mlp_b1, mlp_W2, mlp_b2
        plain: Optional [B, p] block concatenated without crossing

    Returns:
        (hidden [B, m], backward cache)
    """
    if fields.ndim != 3 or fields.shape[1] < 2:
        raise ShapeError('feature_interaction', fields.shape)
    B = fields.shape[0]
    parts = [fields.reshape(B, -1)]
    if plain is not None:
        parts.append(plain)
    parts.extend([pairwise_dots(fields), scalars])
    x = np.concatenate(parts, axis=1)
    if x.shape[1] != params['mlp_W1'].shape[0]:
        raise ShapeError('feature_interaction', x.shape, params['mlp_W1'].shape)
    pre1 = x @ params['mlp_W1'] + params['mlp_b1']
    h1 = relu(pre1)
    pre2 = h1 @ params['mlp_W2'] + params['mlp_b2']
    h2 = relu(pre2)
    return h2, (fields, plain, x, pre1, h1, pre2)


def feature_interaction_backward(cache: Tuple, params: Dict[str, np.ndarray], grad: np.ndarray
                                 ) -> Tuple[np.ndarray, Optional[np.ndarray], Dict[str, np.ndarray]]:
    """Returns (dL/dfields, dL/dplain or None, MLP grads)."""
    fields, plain, x, pre1, h1, pre2 = cache
    B, F, d = fields.shape
    g_pre2 = grad * (pre2 > 0)
    grads = {'mlp_W2': h1.T @ g_pre2, 'mlp_b2': g_pre2.sum(axis=0)}
    g_pre1 = (g_pre2 @ params['mlp_W2'].T) * (pre1 > 0)
    grads['mlp_W1'] = x.T @ g_pre1
    grads['mlp_b1'] = g_pre1.sum(axis=0)
    g_x = g_pre1 @ params['mlp_W1'].T

    g_fields = g_x[:, :F * d].reshape(B, F, d).copy()
    offset = F * d
    g_plain = None
    if plain is not None:
        g_plain = g_x[:, offset:offset + plain.shape[1]]
        offset += plain.shape[1]
    rows, cols = np.triu_indices(F, k=1)
    g_gram = np.zeros((B, F, F))
    g_gram[:, rows, cols] = g_x[:, offset:offset + len(rows)]
    g_fields += g_gram @ fields + g_gram.transpose(0, 2, 1) @ fields
    return g_fields, g_plain, grads


def ctr_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy over the batch."""
    return binary_cross_entropy(np.asarray(probs, dtype=np.float64), np.asarray(labels, dtype=np.float64))


# ----------------------------------------------------------------------------
# Item-side inputs
# ----------------------------------------------------------------------------

@dataclass
class ItemFeatures:
    """Per-item ranker inputs, each indexed by item id.

    ``fine`` holds precomputed fine proxies (serving); ``pooled`` holds the
    cached pooled states the adaptor turns into fine proxies during joint
    training. Masks mark which items have a record; in lenient mode a missing
    record contributes zeros, which is base behaviour for that field.
    """

    n_items: int
    content: Optional[np.ndarray] = None
    static: Optional[np.ndarray] = None
    coarse: Optional[np.ndarray] = None
    pooled: Optional[np.ndarray] = None
    fine: Optional[np.ndarray] = None
    masks: Dict[str, np.ndarray] = field(default_factory=dict)
    strict: bool = True

    def rows(self, kind: str, item_ids: np.ndarray, variant: str) -> np.ndarray:
        values = getattr(self, kind)
        ids = np.asarray(item_ids, dtype=np.int64)
        if values is None:
            raise ProxyNotFoundError(int(ids.flat[0]) if ids.size else -1, variant)
        out = values[ids]
        mask = self.masks.get(kind)
        if mask is not None:
            present = mask[ids]
            if not np.all(present):
                if self.strict:
                    raise ProxyNotFoundError(int(ids[~present].flat[0]), variant)
                out = out * present.reshape(present.shape + (1,) * (out.ndim - present.ndim))
        return out

    @staticmethod
    def from_store(store, n_items: int, content: Optional[np.ndarray] = None,
                   static: Optional[np.ndarray] = None, strict: bool = False) -> 'ItemFeatures':
        """Coarse and fine proxies from an opened ProxyStore; absent ids are masked out."""
        coarse = np.zeros((n_items, store.d))
        fine = np.zeros((n_items, store.d_fine))
        has_coarse = np.zeros(n_items, dtype=bool)
        has_fine = np.zeros(n_items, dtype=bool)
        for item_id in range(n_items):
            if item_id not in store:
                continue
            record = store.lookup(item_id)
            coarse[item_id] = record.p_coarse
            has_coarse[item_id] = True
            if record.p_fine is not None:
                fine[item_id] = record.p_fine
                has_fine[item_id] = True
        return ItemFeatures(n_items=n_items, content=content, static=static, coarse=coarse,
                            fine=fine, masks={'coarse': has_coarse, 'fine': has_fine}, strict=strict)


@dataclass
class Batch:
    user_ids: np.ndarray
    item_ids: np.ndarray
    history: np.ndarray
    scalars: np.ndarray
    labels: Optional[np.ndarray] = None

    @property
    def history_mask(self) -> np.ndarray:
        return self.history >= 0

    @staticmethod
    def from_interactions(interactions, index=slice(None)) -> 'Batch':
        return Batch(user_ids=interactions.user_id[index], item_ids=interactions.item_id[index],
                     history=interactions.history[index], scalars=interactions.scalars[index],
                     labels=interactions.label[index])


# ----------------------------------------------------------------------------
# Ranker
# ----------------------------------------------------------------------------

class CTRRanker:
    """Ranker parameters plus the variant-specific forward and backward."""

    def __init__(self, cfg: RankerConfig, n_users: int, n_items: int, n_scalars: int,
                 d_content: int, d_fine: int = 0, params: Optional[Dict[str, np.ndarray]] = None):
        self.cfg = cfg.validate()
        self.variant = cfg.variant
        self.n_users = n_users
        self.n_items = n_items
        self.n_scalars = n_scalars
        self.d_content = d_content
        self.d_fine = d_fine or cfg.d
        values = params if params is not None else self._init_params()
        self.tensors = {name: Tensor(value) for name, value in values.items()}

    @property
    def input_width(self) -> int:
        d = self.cfg.d
        return N_FIELDS * d + d + N_FIELDS * (N_FIELDS - 1) // 2 + self.n_scalars

    def _init_params(self) -> Dict[str, np.ndarray]:
        rng = np.random.default_rng(self.cfg.seed)
        d, (h1, h2) = self.cfg.d, self.cfg.hidden_sizes
        std = self.cfg.init_std

        def proj(rows: int) -> np.ndarray:
            return rng.standard_normal((rows, d)) / np.sqrt(rows)

        return {
            'user_emb': std * rng.standard_normal((self.n_users, d)),
            'item_emb': std * rng.standard_normal((self.n_items, d)),
            'att_Wq': proj(d), 'att_Wk': proj(d), 'att_Wv': proj(d),
            'W_content': proj(self.d_content),
            'W_static': proj(d),
            'W_coarse': proj(d),
            'W_fp': proj(self.d_fine),
            'W_ff': proj(self.d_fine),
            'W_side': proj(self.d_fine),
            'mlp_W1': rng.standard_normal((self.input_width, h1)) * np.sqrt(2.0 / self.input_width),
            'mlp_b1': np.zeros(h1),
            'mlp_W2': rng.standard_normal((h1, h2)) * np.sqrt(2.0 / h1),
            'mlp_b2': np.zeros(h2),
            'out_w': rng.standard_normal(h2) / np.sqrt(h2),
            'out_b': np.zeros(1),
        }

    @property
    def params(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}

    def param_count(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def zero_proxy_weights(self):
        """Zero every weight that reads a proxy or content input."""
        for name in PROXY_WEIGHTS:
            self.tensors[name].data[...] = 0.0

    # -- forward -------------------------------------------------------------

    def _fine_rows(self, features: ItemFeatures, ids: np.ndarray,
                   adaptor: Optional[FineAdaptor]) -> Tuple[np.ndarray, Optional[Tuple]]:
        """Fine proxies for ids of any shape; from the adaptor when one is given."""
        if adaptor is not None and features.pooled is not None:
            pc = features.rows('coarse', ids, self.variant)
            return adaptor.forward(features.pooled[ids], pc)
        return features.rows('fine', ids, self.variant), None

    def forward(self, batch: Batch, features: ItemFeatures, adaptor: Optional[FineAdaptor] = None,
                train: bool = False, rng: Optional[np.random.Generator] = None
                ) -> Tuple[np.ndarray, Dict]:
        """
        Click probabilities for a batch.

        Args:
            batch: Users, candidate items, histories and scalars
            features: Item-side inputs required by the variant
            adaptor: Fine adaptor for v4/v5 joint training (None uses features.fine)
            train: Apply ID dropout to the candidate's ID vector
            rng: Dropout generator (required when train and id_dropout > 0)

        Returns:
            (probabilities [B], cache for backward)
        """
        p = self.params
        d = self.cfg.d
        aux_source, fine_usage = VARIANT_WIRING[self.variant]
        B = len(batch.item_ids)
        mask = batch.history_mask
        hist = np.where(mask, batch.history, 0)

        e_u = p['user_emb'][batch.user_ids]
        keep = np.ones((B, 1))
        if train and self.cfg.id_dropout > 0:
            keep = (rng.random((B, 1)) >= self.cfg.id_dropout).astype(np.float64)
        e_i = p['item_emb'][batch.item_ids] * keep
        e_h = np.where(mask[..., None], p['item_emb'][hist], 0.0)

        cache: Dict = {'batch': batch, 'mask': mask, 'hist': hist, 'keep': keep}
        slot, keys = e_i, e_h
        pf = pf_h = None
        if fine_usage:
            pf, cache['pf_cache'] = self._fine_rows(features, batch.item_ids, adaptor)
            cache['pf'] = pf
            if 'side' in fine_usage:
                pf_h, cache['pf_h_cache'] = self._fine_rows(features, hist, adaptor)
                pf_h = pf_h * mask[..., None]
                cache['pf_h'] = pf_h
                slot = e_i + pf @ p['W_side']
                keys = np.where(mask[..., None], e_h + pf_h @ p['W_side'], 0.0)

        att, cache['att'] = target_attention(keys, slot, mask, p['att_Wq'], p['att_Wk'], p['att_Wv'])

        aux = np.zeros((B, d))
        if aux_source is not None:
            source = features.rows(aux_source, batch.item_ids, self.variant)
            cache['aux_source'] = source
            aux = source @ p[AUX_WEIGHT[aux_source]]
        fine_field = pf @ p['W_ff'] if 'field' in fine_usage else np.zeros((B, d))
        plain = pf @ p['W_fp'] if 'plain' in fine_usage else np.zeros((B, d))

        fields = np.stack([e_u, slot, att, aux, fine_field], axis=1)
        hidden, cache['fi'] = feature_interaction(fields, batch.scalars, p, plain=plain)
        logits = hidden @ p['out_w'] + p['out_b'][0]
        probs = sigmoid(logits)
        cache.update({'hidden': hidden, 'probs': probs, 'keys': keys, 'slot': slot})
        return probs, cache

    # -- backward ------------------------------------------------------------

    def backward(self, cache: Dict, g_logits: np.ndarray, adaptor: Optional[FineAdaptor] = None
                 ) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray], Dict[str, np.ndarray]]:
        """
        Gradients given dL/dlogit.

        Returns:
            (dense grads, table grads, adaptor grads)
        """
        p = self.params
        batch = cache['batch']
        mask, hist = cache['mask'], cache['hist']
        aux_source, fine_usage = VARIANT_WIRING[self.variant]

        grads = {'out_w': cache['hidden'].T @ g_logits, 'out_b': np.array([g_logits.sum()])}
        g_hidden = np.outer(g_logits, p['out_w'])
        g_fields, g_plain, mlp_grads = feature_interaction_backward(cache['fi'], p, g_hidden)
        grads.update(mlp_grads)

        g_slot, g_att = g_fields[:, FIELD_ITEM], g_fields[:, FIELD_ATTENTION]
        g_keys, g_target, att_grads = target_attention_backward(
            cache['att'], p['att_Wq'], p['att_Wk'], p['att_Wv'], g_att)
        grads.update(att_grads)
        g_slot = g_slot + g_target

        if aux_source is not None:
            grads[AUX_WEIGHT[aux_source]] = cache['aux_source'].T @ g_fields[:, FIELD_AUX]

        g_pf = None
        if fine_usage:
            pf = cache['pf']
            g_pf = np.zeros_like(pf)
            if 'plain' in fine_usage:
                grads['W_fp'] = pf.T @ g_plain
                g_pf += g_plain @ p['W_fp'].T
            if 'field' in fine_usage:
                g_ff = g_fields[:, FIELD_FINE]
                grads['W_ff'] = pf.T @ g_ff
                g_pf += g_ff @ p['W_ff'].T
            if 'side' in fine_usage:
                pf_h = cache['pf_h']
                g_keys_side = g_keys * mask[..., None]
                grads['W_side'] = pf.T @ g_slot + _flat(pf_h).T @ _flat(g_keys_side)
                g_pf += g_slot @ p['W_side'].T
                g_pf_h = (g_keys_side @ p['W_side'].T) * mask[..., None]

        table_grads = {
            'user_emb': (batch.user_ids, g_fields[:, FIELD_USER]),
            'item_emb': (np.concatenate([batch.item_ids, hist[mask]]),
                         np.concatenate([g_slot * cache['keep'], (g_keys * mask[..., None])[mask]])),
        }

        adaptor_grads: Dict[str, np.ndarray] = {}
        if adaptor is not None and cache.get('pf_cache') is not None:
            adaptor_grads = adaptor.backward(cache['pf_cache'], g_pf)
            if 'side' in fine_usage and cache.get('pf_h_cache') is not None:
                for name, value in adaptor.backward(cache['pf_h_cache'], g_pf_h).items():
                    adaptor_grads[name] = adaptor_grads[name] + value
        return grads, table_grads, adaptor_grads

    # -- inference -----------------------------------------------------------

    def predict_batch(self, interactions, features: ItemFeatures,
                      adaptor: Optional[FineAdaptor] = None, batch_size: int = 4096) -> np.ndarray:
        """Probabilities for every interaction of a set, in order."""
        out = np.zeros(len(interactions))
        for start in range(0, len(interactions), batch_size):
            index = slice(start, start + batch_size)
            out[index], _ = self.forward(Batch.from_interactions(interactions, index), features, adaptor)
        return out

    def predict_ctr(self, user_id: int, item_id: int, context, features: ItemFeatures,
                    adaptor: Optional[FineAdaptor] = None) -> float:
        """Probability that user_id clicks item_id under a ContextFeatures context."""
        width = max(1, len(context.history))
        history = np.full((1, width), -1, dtype=np.int64)
        history[0, :len(context.history)] = context.history
        batch = Batch(user_ids=np.array([user_id]), item_ids=np.array([item_id]), history=history,
                      scalars=np.asarray(context.scalars, dtype=np.float64)[None, :])
        probs, _ = self.forward(batch, features, adaptor)
        return float(probs[0])

    # -- persistence ---------------------------------------------------------

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def meta(self) -> Dict:
        return {'variant': self.variant, 'n_users': self.n_users, 'n_items': self.n_items,
                'n_scalars': self.n_scalars, 'd_content': self.d_content, 'd_fine': self.d_fine}

    @staticmethod
    def from_state_dict(cfg: RankerConfig, tensors: Dict[str, np.ndarray], meta: Dict) -> 'CTRRanker':
        return CTRRanker(dataclasses.replace(cfg, variant=meta['variant']),
                         n_users=int(meta['n_users']), n_items=int(meta['n_items']),
                         n_scalars=int(meta['n_scalars']), d_content=int(meta['d_content']),
                         d_fine=int(meta['d_fine']), params=tensors)


@dataclass
class RankerResult:
    ranker: CTRRanker
    adaptor: Optional[FineAdaptor]
    loss_history: List[float]


def required_features(variant: str) -> Tuple[str, ...]:
    aux_source, fine_usage = VARIANT_WIRING[resolve_variant(variant)]
    needed = (aux_source,) if aux_source else ()
    return needed + (('fine',) if fine_usage else ())


def train_ranker(train, features: ItemFeatures, cfg: RankerConfig, n_users: int,
                 d_content: int, adaptor: Optional[FineAdaptor] = None) -> RankerResult:
    """
    Train a ranker variant with AdamW; v4/v5 update the adaptor jointly.

    Embedding tables use lazy updates: only rows present in a batch move, so
    items absent from the training split keep their initial rows bit for bit.

    Args:
        train: Training InteractionSet
        features: Item-side inputs for the variant
        cfg: Ranker hyperparameters (variant included)
        n_users: User table size
        d_content: Width of the v1 content input
        adaptor: Fine adaptor trained jointly for v4/v5

    Returns:
        RankerResult with the loss of every epoch
    """
    cfg.validate()
    if len(train) == 0:
        raise PreconditionError('train_ranker: empty training split')
    log_manager = LogManager()
    variant = cfg.variant
    uses_fine = bool(VARIANT_WIRING[variant][1])
    if not uses_fine:
        adaptor = None
    d_fine = adaptor.d_fine if adaptor is not None else (
        features.fine.shape[1] if features.fine is not None else cfg.d)
    ranker = CTRRanker(cfg, n_users=n_users, n_items=features.n_items,
                       n_scalars=train.scalars.shape[1], d_content=d_content, d_fine=d_fine)

    # fail before training when the variant's inputs are absent
    probe = Batch.from_interactions(train, slice(0, 1))
    ranker.forward(probe, features, adaptor)

    params = dict(ranker.tensors)
    if adaptor is not None:
        params.update({f"adaptor.{name}": t for name, t in adaptor.tensors.items()})
    optimizer = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay, sparse=EMBEDDING_TABLES)
    rng = np.random.default_rng(cfg.seed)
    history: List[float] = []

    for epoch in progress(range(1, cfg.epochs + 1), desc=f"ranker/{variant}"):
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(train), cfg.batch_size):
            batch = Batch.from_interactions(train, order[start:start + cfg.batch_size])
            probs, cache = ranker.forward(batch, features, adaptor, train=True, rng=rng)
            labels = batch.labels.astype(np.float64)
            losses.append(ctr_loss(probs, labels))
            g_logits = binary_cross_entropy_backward(probs, labels) * probs * (1.0 - probs)
            grads, table_grads, adaptor_grads = ranker.backward(cache, g_logits, adaptor)

            optimizer.zero_grad()
            touched = {}
            for name, (rows, row_grads) in table_grads.items():
                full = np.zeros_like(ranker.tensors[name].data)
                np.add.at(full, rows, row_grads)
                ranker.tensors[name].grad = full
                touched[name] = np.unique(rows)
            for name, grad in grads.items():
                ranker.tensors[name].grad = grad
            for name, grad in adaptor_grads.items():
                params[f"adaptor.{name}"].grad = grad
            optimizer.step(touched)
        epoch_loss = float(np.mean(losses))
        history.append(epoch_loss)
        log_manager.log_epoch(f"ranker/{variant}", epoch, epoch_loss)

    return RankerResult(ranker=ranker, adaptor=adaptor, loss_history=history)


# ----------------------------------------------------------------------------
# Composite kernels for the gradient suite
# ----------------------------------------------------------------------------

@register_kernel('target_attention')
class TargetAttentionKernel(Kernel):
    """Inputs: keys, target, Wq, Wk, Wv (the last history slot of row 0 is masked)."""

    def forward(self, keys, target, Wq, Wk, Wv):
        self.W = (Wq, Wk, Wv)
        mask = np.ones(keys.shape[:2], dtype=bool)
        mask[0, -1] = False
        out, self.cache = target_attention(keys, target, mask, Wq, Wk, Wv)
        return out

    def backward(self, grad):
        g_keys, g_target, grads = target_attention_backward(self.cache, *self.W, grad)
        return [g_keys, g_target, grads['att_Wq'], grads['att_Wk'], grads['att_Wv']]


@register_kernel('feature_interaction')
class FeatureInteractionKernel(Kernel):
    """Inputs: fields, plain, scalars, mlp_W1, mlp_b1, mlp_W2, mlp_b2."""

    def forward(self, fields, plain, scalars, W1, b1, W2, b2):
        self.params = {'mlp_W1': W1, 'mlp_b1': b1, 'mlp_W2': W2, 'mlp_b2': b2}
        out, self.cache = feature_interaction(fields, scalars, self.params, plain=plain)
        return out

    def backward(self, grad):
        g_fields, g_plain, grads = feature_interaction_backward(self.cache, self.params, grad)
        return [g_fields, g_plain, None, grads['mlp_W1'], grads['mlp_b1'],
                grads['mlp_W2'], grads['mlp_b2']]

    def kinks(self):
        return (self.cache[3], self.cache[5])


def _tiny_v5(seed: int) -> Tuple[CTRRanker, FineAdaptor, ItemFeatures, Batch]:
    rng = np.random.default_rng(seed)
    n_users, n_items, d, D = 3, 5, 3, 2
    cfg = RankerConfig(d=d, variant='v5_structure_reuse', hidden_sizes=(6, 4), seed=seed)
    ranker = CTRRanker(cfg, n_users=n_users, n_items=n_items, n_scalars=2, d_content=D)
    adaptor = FineAdaptor(d_hidden=D, d=d, adaptor_hidden=4, seed=seed + 1)
    coarse = rng.standard_normal((n_items, d))
    coarse /= np.linalg.norm(coarse, axis=1, keepdims=True)
    features = ItemFeatures(n_items=n_items, coarse=coarse,
                            pooled=rng.standard_normal((n_items, 3, D)))
    batch = Batch(user_ids=np.array([0, 1, 2]), item_ids=np.array([4, 3, 2]),
                  history=np.array([[0, 1, -1], [2, -1, -1], [-1, -1, -1]]),
                  scalars=rng.standard_normal((3, 2)), labels=np.array([1, 0, 1]))
    return ranker, adaptor, features, batch


@register_kernel('ranker_v5')
class RankerV5Kernel(Kernel):
    """Full v5 forward on a tiny fixed batch; inputs are the adaptor parameters."""

    names = ('phi1_W', 'phi1_b', 'phi2_W', 'phi2_b', 'W_c', 'W_g')

    def __init__(self, seed: int = 0):
        self.ranker, self.adaptor, self.features, self.batch = _tiny_v5(seed)

    @classmethod
    def sample_point(cls, seed: int = 0, max_draws: int = 100) -> List[np.ndarray]:
        """Perturbed adaptor parameters with every ReLU input at least KINK_MARGIN from zero."""
        kernel = cls(seed)
        base = {n: kernel.adaptor.tensors[n].data.copy() for n in cls.names}
        rng = np.random.default_rng(seed + 7)
        for _ in range(max_draws):
            point = [base[n] + 0.3 * rng.standard_normal(base[n].shape) for n in cls.names]
            kernel.forward(*point)
            if kink_margin(kernel.kinks()) >= KINK_MARGIN:
                return point
        raise DegenerateInputError(f"ranker_v5: no well-conditioned point in {max_draws} draws (seed {seed})")

    def forward(self, *arrays):
        for name, value in zip(self.names, arrays):
            self.adaptor.tensors[name].data = value
        probs, self.cache = self.ranker.forward(self.batch, self.features, self.adaptor)
        return probs

    def backward(self, grad):
        probs = self.cache['probs']
        _, _, adaptor_grads = self.ranker.backward(self.cache, grad * probs * (1.0 - probs), self.adaptor)
        return [adaptor_grads[name] for name in self.names]

    def kinks(self):
        fi = self.cache['fi']
        sites = [fi[3], fi[5]]
        for key in ('pf_cache', 'pf_h_cache'):
            if self.cache.get(key) is not None:
                adaptor_cache, _ = self.cache[key]
                sites.append(adaptor_cache[1])
        return tuple(sites)
