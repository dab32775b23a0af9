"""
ContentEncoder - Small multimodal attention encoder with per-layer hidden states

Stands in for a multimodal language model: a prompt of image-patch slots, text
tokens and a fixed instruction suffix runs through pre-norm bidirectional
attention blocks. Every layer's hidden states are exposed, together with the
attention pooling g and the projection phi into the ID space.

All forward passes are batched over [B, T] and float64. Backward passes are
written by hand against the kernels in diff_kernels.
"""
import hashlib
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config_manager import EncoderConfig
from diff_kernels import (KINK_MARGIN, Kernel, kink_margin, l2_normalize, l2_normalize_backward,
                          layer_norm, layer_norm_backward, register_kernel, relu, softmax,
                          softmax_backward)
from errors import DegenerateInputError, PreconditionError, ShapeError

SPECIAL_TOKENS = ('BOS', 'EOS', 'EMB', 'IMG', 'THE', 'COMPRESSION', 'WORD', 'IS', 'COLON', 'QUOTE')
# The compression word is : " [EMB] " [EOS]
PROMPT_SUFFIX = ('THE', 'COMPRESSION', 'WORD', 'IS', 'COLON', 'QUOTE', 'EMB', 'QUOTE', 'EOS')

BLOCK_PARAMS = ('ln1_g', 'ln1_b', 'Wq', 'Wk', 'Wv', 'Wo', 'ln2_g', 'ln2_b', 'W1', 'c1', 'W2', 'c2')
# Gradient-check points keep every projected row at least this long before normalization.
PROJECTION_NORM_MARGIN = 0.1


def special_token_id(config: EncoderConfig, name: str) -> int:
    """Special tokens sit right after the content vocabulary."""
    return config.vocab_size + SPECIAL_TOKENS.index(name)


def total_vocab(config: EncoderConfig) -> int:
    return config.vocab_size + len(SPECIAL_TOKENS)


def max_text_tokens(config: EncoderConfig) -> int:
    return config.max_tokens - 1 - config.n_patches - len(PROMPT_SUFFIX)


@dataclass
class PromptTokens:
    """Token ids of one prompt plus the image patches feeding its IMG slots."""

    token_ids: np.ndarray
    patches: np.ndarray
    item_id: Optional[int] = None

    def __len__(self) -> int:
        return len(self.token_ids)


@dataclass
class HiddenStates:
    """Hidden states of layers 0..L; index 0 is the input embedding.

    Each entry is [T, D] for a single prompt or [B, T, D] for a batch.
    """

    layers: List[np.ndarray]

    @property
    def n_layers(self) -> int:
        return len(self.layers) - 1

    def layer(self, index: int) -> np.ndarray:
        return self.layers[index]

    @property
    def final(self) -> np.ndarray:
        return self.layers[-1]


def build_prompt(item, config: EncoderConfig) -> PromptTokens:
    """
    Assemble ``[BOS] IMG*P text suffix`` for an item.

    Args:
        item: Object with content_tokens, image_patches and item_id
        config: Encoder configuration

    Returns:
        PromptTokens whose length is constant for a given config
    """
    tokens = np.asarray(item.content_tokens, dtype=np.int64).ravel()
    patches = np.asarray(item.image_patches, dtype=np.float64)
    item_id = getattr(item, 'item_id', None)
    if tokens.size == 0 or patches.size == 0:
        raise DegenerateInputError('build_prompt: item has empty content',
                                   item_ids=[item_id] if item_id is not None else None)
    if patches.shape != (config.n_patches, config.d_patch):
        raise ShapeError('build_prompt.patches', patches.shape, (config.n_patches, config.d_patch))
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise PreconditionError(
            f"build_prompt: content token outside [0, {config.vocab_size}) for item {item_id}")
    budget = max_text_tokens(config)
    if budget < 1:
        raise PreconditionError('build_prompt: max_tokens leaves no room for text')
    text = tokens[:budget]
    ids = np.concatenate([
        [special_token_id(config, 'BOS')],
        np.full(config.n_patches, special_token_id(config, 'IMG')),
        text,
        [special_token_id(config, name) for name in PROMPT_SUFFIX],
    ]).astype(np.int64)
    return PromptTokens(token_ids=ids, patches=patches.copy(), item_id=item_id)


def init_encoder_params(config: EncoderConfig) -> Dict[str, np.ndarray]:
    """Seeded initial parameters; phi starts near a scaled identity when d <= D."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    D, F, d = config.d_hidden, config.d_ff, config.d_id
    params = {
        'tok_emb': 0.5 * rng.standard_normal((total_vocab(config), D)),
        'pos_emb': 0.1 * rng.standard_normal((config.max_tokens, D)),
        'W_patch': rng.standard_normal((config.d_patch, D)) / np.sqrt(config.d_patch),
        'b_patch': np.zeros(D),
    }
    depth_scale = 1.0 / np.sqrt(2.0 * config.n_layers)
    for layer in range(1, config.n_layers + 1):
        block = {
            'ln1_g': np.ones(D), 'ln1_b': np.zeros(D),
            'Wq': rng.standard_normal((D, D)) / np.sqrt(D),
            'Wk': rng.standard_normal((D, D)) / np.sqrt(D),
            'Wv': rng.standard_normal((D, D)) / np.sqrt(D),
            'Wo': depth_scale * rng.standard_normal((D, D)) / np.sqrt(D),
            'ln2_g': np.ones(D), 'ln2_b': np.zeros(D),
            'W1': rng.standard_normal((D, F)) * np.sqrt(2.0 / D),
            'c1': np.zeros(F),
            'W2': depth_scale * rng.standard_normal((F, D)) / np.sqrt(F),
            'c2': np.zeros(D),
        }
        for name, value in block.items():
            params[f"block{layer}.{name}"] = value
    params['pool_q'] = np.zeros(D)
    params['phi_W1'] = np.eye(D) + 0.1 * rng.standard_normal((D, D)) / np.sqrt(D)
    params['phi_b1'] = np.full(D, 0.1)
    params['phi_W2'] = rng.standard_normal((D, d)) / np.sqrt(D)
    params['phi_b2'] = np.zeros(d)
    return params


# ----------------------------------------------------------------------------
# Pooling and projection
# ----------------------------------------------------------------------------

def pool_g(H: np.ndarray, q: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Single-query attention pooling over tokens.

    Args:
        H: Token states [..., T, D]
        q: Learned query [D]

    Returns:
        (z [..., D], attention weights [..., T])
    """
    if H.shape[-1] != q.shape[0] or H.shape[-2] < 1:
        raise ShapeError('pool_g', H.shape, q.shape)
    weights = softmax(H @ q / np.sqrt(H.shape[-1]), axis=-1)
    return np.einsum('...t,...td->...d', weights, H), weights


def pool_g_backward(H: np.ndarray, q: np.ndarray, weights: np.ndarray,
                    grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    scale = 1.0 / np.sqrt(H.shape[-1])
    g_weights = np.einsum('...td,...d->...t', H, grad)
    g_scores = softmax_backward(weights, g_weights) * scale
    g_H = weights[..., None] * grad[..., None, :] + g_scores[..., None] * q
    g_q = _flat(g_scores[..., None] * H).sum(axis=0)
    return g_H, g_q


def project_phi(z: np.ndarray, params: Dict[str, np.ndarray],
                item_ids: Optional[Sequence[int]] = None) -> Tuple[np.ndarray, Tuple]:
    """
    Two-layer ReLU MLP D -> D -> d followed by l2 normalization.

    Returns:
        (unit-norm h [..., d], backward cache)
    """
    pre = z @ params['phi_W1'] + params['phi_b1']
    hidden = relu(pre)
    out = hidden @ params['phi_W2'] + params['phi_b2']
    try:
        h, norm = l2_normalize(out)
    except DegenerateInputError as e:
        ids = [item_ids[r] for r in e.rows] if item_ids is not None else None
        raise DegenerateInputError('project_phi: projection collapsed to zero', item_ids=ids,
                                   rows=e.rows) from e
    return h, (z, pre, hidden, h, norm)


def project_phi_backward(cache: Tuple, params: Dict[str, np.ndarray],
                         grad: np.ndarray) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    z, pre, hidden, h, norm = cache
    g_out = l2_normalize_backward(h, norm, grad)
    D = z.shape[-1]
    grads = {
        'phi_W2': hidden.reshape(-1, hidden.shape[-1]).T @ g_out.reshape(-1, g_out.shape[-1]),
        'phi_b2': g_out.reshape(-1, g_out.shape[-1]).sum(axis=0),
    }
    g_pre = (g_out @ params['phi_W2'].T) * (pre > 0)
    grads['phi_W1'] = z.reshape(-1, D).T @ g_pre.reshape(-1, D)
    grads['phi_b1'] = g_pre.reshape(-1, D).sum(axis=0)
    return g_pre @ params['phi_W1'].T, grads


# ----------------------------------------------------------------------------
# Encoder
# ----------------------------------------------------------------------------

def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    B, T, D = x.shape
    return x.reshape(B, T, n_heads, D // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    B, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


def _flat(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


class ContentEncoder:
    """Prompt encoder with named float64 parameters."""

    def __init__(self, config: EncoderConfig, params: Optional[Dict[str, np.ndarray]] = None):
        self.config = config.validate()
        self.params = init_encoder_params(config) if params is None else {
            name: np.asarray(value, dtype=np.float64) for name, value in params.items()}

    # -- prompts -------------------------------------------------------------

    def build_prompt(self, item) -> PromptTokens:
        return build_prompt(item, self.config)

    def prompt_arrays(self, prompts: Sequence[PromptTokens]) -> Tuple[np.ndarray, np.ndarray]:
        lengths = {len(p) for p in prompts}
        if len(lengths) != 1:
            raise ShapeError('prompt_arrays', *[(n,) for n in sorted(lengths)])
        ids = np.stack([p.token_ids for p in prompts])
        patches = np.stack([p.patches for p in prompts])
        return ids, patches

    # -- forward -------------------------------------------------------------

    def _embed(self, ids: np.ndarray, patches: np.ndarray) -> np.ndarray:
        cfg = self.config
        if ids.min() < 0 or ids.max() >= total_vocab(cfg):
            raise PreconditionError(f"encode: token id outside [0, {total_vocab(cfg)})")
        if ids.shape[1] > cfg.max_tokens:
            raise ShapeError('encode', ids.shape, (ids.shape[0], cfg.max_tokens))
        p = self.params
        x = p['tok_emb'][ids] + p['pos_emb'][:ids.shape[1]]
        x[:, 1:1 + cfg.n_patches] += patches @ p['W_patch'] + p['b_patch']
        return x

    def _block_forward(self, layer: int, x: np.ndarray) -> Tuple[np.ndarray, Dict]:
        p = {name: self.params[f"block{layer}.{name}"] for name in BLOCK_PARAMS}
        heads = self.config.n_heads
        eps = self.config.ln_eps
        ln1, ln1_cache = layer_norm(x, p['ln1_g'], p['ln1_b'], eps)
        q = _split_heads(ln1 @ p['Wq'], heads)
        k = _split_heads(ln1 @ p['Wk'], heads)
        v = _split_heads(ln1 @ p['Wv'], heads)
        scale = 1.0 / np.sqrt(q.shape[-1])
        attn = softmax(q @ k.transpose(0, 1, 3, 2) * scale, axis=-1)
        ctx = _merge_heads(attn @ v)
        x1 = x + ctx @ p['Wo']
        ln2, ln2_cache = layer_norm(x1, p['ln2_g'], p['ln2_b'], eps)
        pre = ln2 @ p['W1'] + p['c1']
        act = relu(pre)
        x2 = x1 + act @ p['W2'] + p['c2']
        cache = {'ln1': ln1, 'ln1_cache': ln1_cache, 'q': q, 'k': k, 'v': v, 'attn': attn,
                 'ctx': ctx, 'ln2': ln2, 'ln2_cache': ln2_cache, 'pre': pre, 'act': act}
        return x2, cache

    def forward(self, ids: np.ndarray, patches: np.ndarray,
                keep_cache: bool = False) -> Tuple[HiddenStates, Optional[List[Dict]]]:
        """Run all blocks on a batch; returns hidden states of layers 0..L."""
        x = self._embed(ids, patches)
        layers = [x]
        caches = [] if keep_cache else None
        for layer in range(1, self.config.n_layers + 1):
            x, cache = self._block_forward(layer, x)
            layers.append(x)
            if keep_cache:
                caches.append(cache)
        return HiddenStates(layers=layers), caches

    def encode(self, prompt: PromptTokens) -> HiddenStates:
        """Hidden states [T, D] of every layer for one prompt."""
        states, _ = self.forward(prompt.token_ids[None, :], prompt.patches[None])
        return HiddenStates(layers=[h[0] for h in states.layers])

    def pool(self, H: np.ndarray) -> np.ndarray:
        return pool_g(H, self.params['pool_q'])[0]

    def project(self, z: np.ndarray, item_ids: Optional[Sequence[int]] = None) -> np.ndarray:
        return project_phi(z, self.params, item_ids)[0]

    def forward_chain(self, ids: np.ndarray, patches: np.ndarray,
                      item_ids: Optional[Sequence[int]] = None) -> Tuple[np.ndarray, Dict]:
        """encode -> pool_g(final layer) -> project_phi, keeping every cache."""
        states, block_caches = self.forward(ids, patches, keep_cache=True)
        z, weights = pool_g(states.final, self.params['pool_q'])
        h, phi_cache = project_phi(z, self.params, item_ids)
        cache = {'ids': ids, 'patches': patches, 'states': states, 'blocks': block_caches,
                 'weights': weights, 'phi': phi_cache}
        return h, cache

    # -- backward ------------------------------------------------------------

    def _block_backward(self, layer: int, x: np.ndarray, cache: Dict, grad: np.ndarray,
                        grads: Dict[str, np.ndarray]) -> np.ndarray:
        prefix = f"block{layer}."
        p = {name: self.params[prefix + name] for name in BLOCK_PARAMS}

        g_x1 = grad.copy()
        grads[prefix + 'W2'] = _flat(cache['act']).T @ _flat(grad)
        grads[prefix + 'c2'] = _flat(grad).sum(axis=0)
        g_pre = (grad @ p['W2'].T) * (cache['pre'] > 0)
        grads[prefix + 'W1'] = _flat(cache['ln2']).T @ _flat(g_pre)
        grads[prefix + 'c1'] = _flat(g_pre).sum(axis=0)
        g_ln2 = g_pre @ p['W1'].T
        g_in, grads[prefix + 'ln2_g'], grads[prefix + 'ln2_b'] = layer_norm_backward(cache['ln2_cache'], g_ln2)
        g_x1 += g_in

        grads[prefix + 'Wo'] = _flat(cache['ctx']).T @ _flat(g_x1)
        g_ctx = _split_heads(g_x1 @ p['Wo'].T, self.config.n_heads)
        q, k, v, attn = cache['q'], cache['k'], cache['v'], cache['attn']
        scale = 1.0 / np.sqrt(q.shape[-1])
        g_attn = g_ctx @ v.transpose(0, 1, 3, 2)
        g_v = attn.transpose(0, 1, 3, 2) @ g_ctx
        g_scores = softmax_backward(attn, g_attn) * scale
        g_q = _merge_heads(g_scores @ k)
        g_k = _merge_heads(g_scores.transpose(0, 1, 3, 2) @ q)
        g_v = _merge_heads(g_v)
        ln1 = _flat(cache['ln1'])
        grads[prefix + 'Wq'] = ln1.T @ _flat(g_q)
        grads[prefix + 'Wk'] = ln1.T @ _flat(g_k)
        grads[prefix + 'Wv'] = ln1.T @ _flat(g_v)
        g_ln1 = g_q @ p['Wq'].T + g_k @ p['Wk'].T + g_v @ p['Wv'].T
        g_in, grads[prefix + 'ln1_g'], grads[prefix + 'ln1_b'] = layer_norm_backward(cache['ln1_cache'], g_ln1)
        return g_x1 + g_in

    def backward_chain(self, cache: Dict, grad: np.ndarray) -> Dict[str, np.ndarray]:
        """
        Gradients of every parameter given dLoss/dh for the output of forward_chain.

        Args:
            cache: Cache returned by forward_chain
            grad: Gradient w.r.t. the projected, normalized output [B, d]

        Returns:
            Parameter name -> gradient
        """
        grads: Dict[str, np.ndarray] = {}
        g_z, phi_grads = project_phi_backward(cache['phi'], self.params, grad)
        grads.update(phi_grads)
        states = cache['states']
        g_x, grads['pool_q'] = pool_g_backward(states.final, self.params['pool_q'],
                                               cache['weights'], g_z)
        for layer in range(self.config.n_layers, 0, -1):
            g_x = self._block_backward(layer, states.layer(layer - 1), cache['blocks'][layer - 1],
                                       g_x, grads)

        ids, patches = cache['ids'], cache['patches']
        cfg = self.config
        g_tok = np.zeros_like(self.params['tok_emb'])
        np.add.at(g_tok, ids, g_x)
        grads['tok_emb'] = g_tok
        g_pos = np.zeros_like(self.params['pos_emb'])
        g_pos[:ids.shape[1]] = g_x.sum(axis=0)
        grads['pos_emb'] = g_pos
        g_slots = g_x[:, 1:1 + cfg.n_patches]
        grads['W_patch'] = _flat(patches).T @ _flat(g_slots)
        grads['b_patch'] = _flat(g_slots).sum(axis=0)
        return grads

    # -- item-level helpers --------------------------------------------------

    def _batches(self, prompts: List[PromptTokens], batch_size: int):
        """Yield (indices, ids, patches) grouped by prompt length."""
        by_length: Dict[int, List[int]] = {}
        for index, prompt in enumerate(prompts):
            by_length.setdefault(len(prompt), []).append(index)
        for length in sorted(by_length):
            indices = by_length[length]
            for start in range(0, len(indices), batch_size):
                chunk = indices[start:start + batch_size]
                ids, patches = self.prompt_arrays([prompts[i] for i in chunk])
                yield np.asarray(chunk), ids, patches

    def pooled_layers(self, prompts: List[PromptTokens], layers: Sequence[int],
                      batch_size: int = 256) -> np.ndarray:
        """pool_g of the requested layers for every prompt: [N, len(layers), D]."""
        out = np.zeros((len(prompts), len(layers), self.config.d_hidden))
        for chunk, ids, patches in self._batches(prompts, batch_size):
            states, _ = self.forward(ids, patches)
            for j, layer in enumerate(layers):
                out[chunk, j] = self.pool(states.layer(layer))
        return out

    def embed_items(self, prompts: List[PromptTokens],
                    batch_size: int = 256) -> Tuple[np.ndarray, np.ndarray]:
        """Final-layer pooled state z and projected proxy h for every prompt."""
        z_all = np.zeros((len(prompts), self.config.d_hidden))
        h_all = np.zeros((len(prompts), self.config.d_id))
        for chunk, ids, patches in self._batches(prompts, batch_size):
            states, _ = self.forward(ids, patches)
            z = self.pool(states.final)
            z_all[chunk] = z
            h_all[chunk] = self.project(z, item_ids=[prompts[i].item_id for i in chunk])
        return z_all, h_all

    def parameter_hash(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.params):
            value = np.ascontiguousarray(self.params[name], dtype='<f8')
            digest.update(name.encode())
            digest.update(str(value.shape).encode())
            digest.update(value.tobytes())
        return digest.hexdigest()

    def copy(self) -> 'ContentEncoder':
        return ContentEncoder(self.config, {k: v.copy() for k, v in self.params.items()})

    def param_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def tiny_encoder_config(seed: int = 0) -> EncoderConfig:
    """Smallest encoder the gradient suite runs on."""
    return EncoderConfig(n_layers=3, d_hidden=4, n_heads=2, vocab_size=6, max_tokens=16,
                         d_id=3, d_ff=8, n_patches=2, d_patch=3, seed=seed)


@register_kernel('encoder_chain')
class EncoderChainKernel(Kernel):
    """encode -> pool_g -> project_phi on a fixed two-prompt batch.

    The differentiable inputs are the parameters named in ``checked``.
    """

    checked = ('tok_emb', 'W_patch', 'block1.Wq', 'block1.W1', 'block2.ln1_g',
               'block3.Wv', 'pool_q', 'phi_W1', 'phi_W2')

    def __init__(self, seed: int = 0):
        self.encoder = ContentEncoder(tiny_encoder_config(seed))
        rng = np.random.default_rng(seed + 1)
        cfg = self.encoder.config
        prompts = []
        for item_id in range(2):
            item = _ProbeItem(item_id, rng.integers(0, cfg.vocab_size, size=4),
                              rng.standard_normal((cfg.n_patches, cfg.d_patch)))
            prompts.append(build_prompt(item, cfg))
        self.ids, self.patches = self.encoder.prompt_arrays(prompts)

    @classmethod
    def sample_point(cls, seed: int = 0, max_draws: int = 100) -> List[np.ndarray]:
        """
        Perturbed parameters at which the chain is differentiable.

        Draws are repeated until every ReLU input is at least KINK_MARGIN from
        zero and every projection norm is at least PROJECTION_NORM_MARGIN.
        """
        kernel = cls(seed)
        base = {name: kernel.encoder.params[name].copy() for name in cls.checked}
        rng = np.random.default_rng(seed + 2)
        for _ in range(max_draws):
            point = [base[name] + 0.1 * rng.standard_normal(base[name].shape) for name in cls.checked]
            try:
                kernel.forward(*point)
            except DegenerateInputError:
                continue
            norms = kernel.cache['phi'][4]
            if kink_margin(kernel.kinks()) >= KINK_MARGIN and np.min(norms) >= PROJECTION_NORM_MARGIN:
                return point
        raise DegenerateInputError(f"encoder_chain: no well-conditioned point in {max_draws} draws (seed {seed})")

    def forward(self, *arrays):
        for name, value in zip(self.checked, arrays):
            self.encoder.params[name] = value
        out, self.cache = self.encoder.forward_chain(self.ids, self.patches)
        return out

    def backward(self, grad):
        grads = self.encoder.backward_chain(self.cache, grad)
        return [grads[name] for name in self.checked]

    def kinks(self):
        return tuple(block['pre'] for block in self.cache['blocks']) + (self.cache['phi'][1],)


@dataclass
class _ProbeItem:
    item_id: int
    content_tokens: np.ndarray
    image_patches: np.ndarray
