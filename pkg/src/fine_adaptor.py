"""
FineAdaptor - Multi-granularity adaptor and residual gate producing fine proxies
"""
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from diff_kernels import Kernel, Tensor, register_kernel, relu, sigmoid
from errors import ProxyNotFoundError, ShapeError

ADAPTOR_PARAMS = ('phi1_W', 'phi1_b', 'phi2_W', 'phi2_b', 'W_c', 'W_g')


def _flat(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


def init_adaptor_params(d_hidden: int, d: int, d_fine: int, adaptor_hidden: int,
                        seed: int = 0) -> Dict[str, np.ndarray]:
    """phi starts small and W_c at the identity, so p_fine starts next to p_coarse."""
    rng = np.random.default_rng(seed)
    width = 3 * d_hidden
    return {
        'phi1_W': rng.standard_normal((width, adaptor_hidden)) * np.sqrt(2.0 / width),
        'phi1_b': np.zeros(adaptor_hidden),
        'phi2_W': 0.1 * rng.standard_normal((adaptor_hidden, d_fine)) / np.sqrt(adaptor_hidden),
        'phi2_b': np.zeros(d_fine),
        'W_c': np.eye(d_fine, d),
        'W_g': 0.01 * rng.standard_normal((d_fine, d + d_fine)),
    }


def fine_adaptor(z1: np.ndarray, z2: np.ndarray, z3: np.ndarray,
                 params: Mapping[str, np.ndarray]) -> Tuple[np.ndarray, Tuple]:
    """
    phi~(concat(z1, z2, z3)): 3D -> hidden -> d~ with a ReLU.

    Returns:
        (p_raw_fine [..., d~], backward cache)
    """
    if not (z1.shape == z2.shape == z3.shape):
        raise ShapeError('fine_adaptor', z1.shape, z2.shape, z3.shape)
    z = np.concatenate([z1, z2, z3], axis=-1)
    if z.shape[-1] != params['phi1_W'].shape[0]:
        raise ShapeError('fine_adaptor', z.shape, params['phi1_W'].shape)
    pre = z @ params['phi1_W'] + params['phi1_b']
    hidden = relu(pre)
    return hidden @ params['phi2_W'] + params['phi2_b'], (z, pre, hidden)


def fine_adaptor_backward(cache: Tuple, params: Mapping[str, np.ndarray],
                          grad: np.ndarray) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """Returns (dL/dz for the concatenated input, parameter grads)."""
    z, pre, hidden = cache
    flat_g = grad.reshape(-1, grad.shape[-1])
    grads = {
        'phi2_W': hidden.reshape(-1, hidden.shape[-1]).T @ flat_g,
        'phi2_b': flat_g.sum(axis=0),
    }
    g_pre = (grad @ params['phi2_W'].T) * (pre > 0)
    flat_pre = g_pre.reshape(-1, g_pre.shape[-1])
    grads['phi1_W'] = z.reshape(-1, z.shape[-1]).T @ flat_pre
    grads['phi1_b'] = flat_pre.sum(axis=0)
    return g_pre @ params['phi1_W'].T, grads


def gate_fuse(p_coarse: np.ndarray, p_raw_fine: np.ndarray,
              params: Mapping[str, np.ndarray]) -> Tuple[np.ndarray, Tuple]:
    """
    r = sigmoid(W_g [p_coarse, p_raw_fine]);  p_fine = W_c p_coarse + r * p_raw_fine

    Returns:
        (p_fine [..., d~], backward cache)
    """
    W_c, W_g = params['W_c'], params['W_g']
    if p_coarse.shape[-1] != W_c.shape[1] or p_raw_fine.shape[-1] != W_c.shape[0]:
        raise ShapeError('gate_fuse', p_coarse.shape, p_raw_fine.shape, W_c.shape)
    joint = np.concatenate([p_coarse, p_raw_fine], axis=-1)
    r = sigmoid(joint @ W_g.T)
    return p_coarse @ W_c.T + r * p_raw_fine, (p_coarse, p_raw_fine, joint, r)


def gate_fuse_backward(cache: Tuple, params: Mapping[str, np.ndarray],
                       grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray, Dict[str, np.ndarray]]:
    """Returns (dL/dp_coarse, dL/dp_raw_fine, {W_c, W_g})."""
    p_coarse, p_raw_fine, joint, r = cache
    d = p_coarse.shape[-1]
    g_r = grad * p_raw_fine
    g_logit = g_r * r * (1.0 - r)
    grads = {
        'W_c': _flat(grad).T @ _flat(p_coarse),
        'W_g': _flat(g_logit).T @ _flat(joint),
    }
    g_joint = g_logit @ params['W_g']
    g_coarse = grad @ params['W_c'] + g_joint[..., :d]
    g_raw = grad * r + g_joint[..., d:]
    return g_coarse, g_raw, grads


class FineAdaptor:
    """phi~, W_c and W_g as named Tensors, trained jointly with the ranker."""

    def __init__(self, d_hidden: int, d: int, d_fine: int = 0, adaptor_hidden: int = 16,
                 seed: int = 0, params: Optional[Dict[str, np.ndarray]] = None,
                 layers: Sequence[int] = ()):
        self.d_hidden = d_hidden
        self.d = d
        self.d_fine = d_fine or d
        self.adaptor_hidden = adaptor_hidden
        self.layers = tuple(int(x) for x in layers)
        values = params if params is not None else init_adaptor_params(
            d_hidden, d, self.d_fine, adaptor_hidden, seed)
        self.tensors = {name: Tensor(values[name]) for name in ADAPTOR_PARAMS}

    @property
    def params(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}

    def param_count(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def forward(self, pooled: np.ndarray, p_coarse: np.ndarray) -> Tuple[np.ndarray, Tuple]:
        """
        Args:
            pooled: [..., 3, D] cached pooled states of the partition's layers
            p_coarse: [..., d] coarse proxies (constants)

        Returns:
            (p_fine [..., d~], cache)
        """
        if pooled.shape[-2] != 3 or pooled.shape[-1] != self.d_hidden:
            raise ShapeError('FineAdaptor.forward', pooled.shape, (3, self.d_hidden))
        params = self.params
        raw, adaptor_cache = fine_adaptor(pooled[..., 0, :], pooled[..., 1, :], pooled[..., 2, :], params)
        fine, gate_cache = gate_fuse(p_coarse, raw, params)
        return fine, (adaptor_cache, gate_cache)

    def backward(self, cache: Tuple, grad: np.ndarray) -> Dict[str, np.ndarray]:
        """Parameter grads; p_coarse and the pooled states receive none."""
        adaptor_cache, gate_cache = cache
        params = self.params
        _, g_raw, grads = gate_fuse_backward(gate_cache, params, grad)
        _, adaptor_grads = fine_adaptor_backward(adaptor_cache, params, g_raw)
        grads.update(adaptor_grads)
        return grads

    def gate(self, pooled: np.ndarray, p_coarse: np.ndarray) -> np.ndarray:
        params = self.params
        raw, _ = fine_adaptor(pooled[..., 0, :], pooled[..., 1, :], pooled[..., 2, :], params)
        _, (_, _, _, r) = gate_fuse(p_coarse, raw, params)
        return r

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def meta(self) -> Dict:
        return {'d_hidden': self.d_hidden, 'd': self.d, 'd_fine': self.d_fine,
                'adaptor_hidden': self.adaptor_hidden, 'layers': list(self.layers)}

    @staticmethod
    def from_state_dict(tensors: Dict[str, np.ndarray], meta: Dict) -> 'FineAdaptor':
        return FineAdaptor(d_hidden=int(meta['d_hidden']), d=int(meta['d']),
                           d_fine=int(meta['d_fine']), adaptor_hidden=int(meta['adaptor_hidden']),
                           params=tensors, layers=meta.get('layers', ()))


def emit_fine_proxies(item_ids: Sequence[int], pooled_states: np.ndarray,
                      coarse: Union[np.ndarray, Mapping[int, np.ndarray]],
                      adaptor: FineAdaptor, batch_size: int = 1024) -> np.ndarray:
    """
    Fine proxies for the given items from the cached pooled states.

    Args:
        item_ids: Items to emit, warm or cold
        pooled_states: [n_items, 3, D] indexed by item id
        coarse: Coarse proxies indexed by item id (matrix or mapping)
        adaptor: Trained adaptor
        batch_size: Rows per forward pass (results do not depend on it)

    Returns:
        [len(item_ids), d~] in item_ids order
    """
    ids = np.asarray(item_ids, dtype=np.int64)
    if isinstance(coarse, np.ndarray):
        missing = ids[(ids < 0) | (ids >= coarse.shape[0])]
        if missing.size:
            raise ProxyNotFoundError(int(missing[0]), 'coarse')
        pc = coarse[ids]
    else:
        for item_id in ids:
            if int(item_id) not in coarse:
                raise ProxyNotFoundError(int(item_id), 'coarse')
        pc = np.stack([np.asarray(coarse[int(i)], dtype=np.float64) for i in ids])
    out = np.zeros((len(ids), adaptor.d_fine))
    for start in range(0, len(ids), batch_size):
        rows = slice(start, start + batch_size)
        out[rows], _ = adaptor.forward(pooled_states[ids[rows]], pc[rows])
    return out


@register_kernel('fine_adaptor')
class FineAdaptorKernel(Kernel):
    """Inputs: z1, z2, z3, phi1_W, phi1_b, phi2_W, phi2_b."""

    def forward(self, z1, z2, z3, phi1_W, phi1_b, phi2_W, phi2_b):
        self.params = {'phi1_W': phi1_W, 'phi1_b': phi1_b, 'phi2_W': phi2_W, 'phi2_b': phi2_b}
        self.width = z1.shape[-1]
        out, self.cache = fine_adaptor(z1, z2, z3, self.params)
        return out

    def backward(self, grad):
        g_z, grads = fine_adaptor_backward(self.cache, self.params, grad)
        w = self.width
        return [g_z[..., :w], g_z[..., w:2 * w], g_z[..., 2 * w:],
                grads['phi1_W'], grads['phi1_b'], grads['phi2_W'], grads['phi2_b']]

    def kinks(self):
        return (self.cache[1],)


@register_kernel('gate_fuse')
class GateFuseKernel(Kernel):
    """Inputs: p_coarse, p_raw_fine, W_c, W_g."""

    def forward(self, p_coarse, p_raw_fine, W_c, W_g):
        self.params = {'W_c': W_c, 'W_g': W_g}
        out, self.cache = gate_fuse(p_coarse, p_raw_fine, self.params)
        return out

    def backward(self, grad):
        g_coarse, g_raw, grads = gate_fuse_backward(self.cache, self.params, grad)
        return [g_coarse, g_raw, grads['W_c'], grads['W_g']]
