"""
ContentBaselines - Unaligned content features for the ladder's first two rungs

v1 feeds the pooled final-layer state of an encoder that never saw the ID
space. v2 learns a static MLP from that frozen state to the ID targets by
regression before ranker training.
"""
from typing import Dict, List, Optional, Sequence

import numpy as np

from content_encoder import ContentEncoder
from diff_kernels import AdamW, Tensor, relu
from log_manager import LogManager, progress
from proxy_aligner import IdEmbeddingTable

MAPPER_PARAMS = ('W1', 'b1', 'W2', 'b2')


def content_features(encoder: ContentEncoder, items: Sequence) -> np.ndarray:
    """Final-layer pooled state z of every item, rows indexed by item id."""
    ordered = sorted(items, key=lambda item: item.item_id)
    z, _ = encoder.embed_items([encoder.build_prompt(item) for item in ordered])
    return z


class StaticMapper:
    """Two-layer ReLU MLP D -> D -> d regressed onto ID targets."""

    def __init__(self, d_in: int, d_out: int, seed: int = 0,
                 params: Optional[Dict[str, np.ndarray]] = None):
        self.d_in = d_in
        self.d_out = d_out
        if params is None:
            rng = np.random.default_rng(seed)
            params = {
                'W1': rng.standard_normal((d_in, d_in)) * np.sqrt(2.0 / d_in),
                'b1': np.zeros(d_in),
                'W2': rng.standard_normal((d_in, d_out)) / np.sqrt(d_in),
                'b2': np.zeros(d_out),
            }
        self.tensors = {name: Tensor(params[name]) for name in MAPPER_PARAMS}
        self.loss_history: List[float] = []

    def predict(self, z: np.ndarray) -> np.ndarray:
        p = {name: t.data for name, t in self.tensors.items()}
        return relu(z @ p['W1'] + p['b1']) @ p['W2'] + p['b2']

    def fit(self, z: np.ndarray, table: IdEmbeddingTable, epochs: int, lr: float,
            weight_decay: float = 0.0) -> List[float]:
        """
        Full-batch mean-squared regression of predict(z[item]) onto the table's targets.

        Args:
            z: Frozen content states indexed by item id
            table: Preprocessed ID targets (warm items only)
            epochs: Optimizer steps
            lr: AdamW learning rate
            weight_decay: AdamW decoupled decay

        Returns:
            Loss per step
        """
        log_manager = LogManager()
        x = z[table.item_ids]
        y = table.vectors
        optimizer = AdamW(self.tensors, lr=lr, weight_decay=weight_decay)
        n = x.shape[0]
        for step in progress(range(1, epochs + 1), desc='v2 mapper'):
            p = {name: t.data for name, t in self.tensors.items()}
            pre = x @ p['W1'] + p['b1']
            hidden = relu(pre)
            err = hidden @ p['W2'] + p['b2'] - y
            loss = float(np.mean(np.sum(err * err, axis=1)))
            g_out = 2.0 * err / n
            g_pre = (g_out @ p['W2'].T) * (pre > 0)
            optimizer.zero_grad()
            self.tensors['W2'].grad = hidden.T @ g_out
            self.tensors['b2'].grad = g_out.sum(axis=0)
            self.tensors['W1'].grad = x.T @ g_pre
            self.tensors['b1'].grad = g_pre.sum(axis=0)
            optimizer.step()
            self.loss_history.append(loss)
            if step == 1 or step == epochs or step % 50 == 0:
                log_manager.log_epoch('v2_mapper', step, loss)
        return self.loss_history

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    @staticmethod
    def from_state_dict(tensors: Dict[str, np.ndarray]) -> 'StaticMapper':
        d_in, d_out = tensors['W2'].shape
        return StaticMapper(d_in, d_out, params=tensors)
