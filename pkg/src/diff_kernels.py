"""
DiffKernels - Differentiable numeric kernels, finite-difference checking and AdamW

Every model in the pipeline is a small fixed graph with a hand-written
backward pass built from the functional pairs in this module
(``<op>`` / ``<op>_backward``). The registered ``Kernel`` classes wrap the
same functions behind a forward/backward contract so that ``grad_check`` can
verify them, and composite models register themselves the same way.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigurationError, DegenerateInputError, NumericError, PreconditionError, ShapeError

PROB_CLIP = 1e-7
NORM_FLOOR = 1e-12


@dataclass
class Tensor:
    """Named model parameter: data plus an optional gradient of identical shape."""

    data: np.ndarray
    requires_grad: bool = True
    grad: Optional[np.ndarray] = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape


@dataclass
class GradReport:
    """Result of a central-difference gradient check."""

    op_name: str
    max_rel_err: float
    tolerance: float
    passed: bool
    n_checked: int = 0
    n_skipped: int = 0
    error: str = ''

    def to_dict(self) -> Dict:
        return {
            'op_name': self.op_name,
            'max_rel_err': self.max_rel_err,
            'tolerance': self.tolerance,
            'passed': self.passed,
            'n_checked': self.n_checked,
            'n_skipped': self.n_skipped,
            'error': self.error,
        }


def _check_same_shape(op_name: str, a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeError(op_name, a.shape, b.shape)


# ----------------------------------------------------------------------------
# Functional forward/backward pairs
# ----------------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError('matmul', a.shape, b.shape)
    return a @ b


def matmul_backward(a: np.ndarray, b: np.ndarray, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    ga = grad @ b.T
    gb = a.reshape(-1, a.shape[-1]).T @ grad.reshape(-1, grad.shape[-1])
    return ga, gb


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(y: np.ndarray, grad: np.ndarray, axis: int = -1) -> np.ndarray:
    return y * (grad - np.sum(grad * y, axis=axis, keepdims=True))


def masked_softmax(x: np.ndarray, mask: np.ndarray, axis: int = -1) -> np.ndarray:
    """Softmax over entries where mask is True; rows with no valid entry give all zeros."""
    masked = np.where(mask, x, -np.inf)
    row_max = np.max(masked, axis=axis, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(mask, np.exp(np.where(mask, x, 0.0) - row_max), 0.0)
    denom = np.sum(e, axis=axis, keepdims=True)
    return e / np.where(denom > 0, denom, 1.0)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def log_softmax_backward(y: np.ndarray, grad: np.ndarray, axis: int = -1) -> np.ndarray:
    return grad - np.exp(y) * np.sum(grad, axis=axis, keepdims=True)


def logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-log(1 + e^-x)) never overflows
    return np.exp(-np.logaddexp(0.0, -np.asarray(x, dtype=np.float64)))


def sigmoid_backward(y: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return grad * y * (1.0 - y)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return grad * (x > 0)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
               eps: float = 1e-5) -> Tuple[np.ndarray, Tuple]:
    """Normalize over the last axis; returns the output and the backward cache."""
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError('layer_norm', x.shape, gamma.shape, beta.shape)
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    return xhat * gamma + beta, (xhat, inv_std, gamma)


def layer_norm_backward(cache: Tuple, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv_std, gamma = cache
    flat = grad.reshape(-1, grad.shape[-1])
    ggamma = np.sum(flat * xhat.reshape(flat.shape), axis=0)
    gbeta = flat.sum(axis=0)
    gxhat = grad * gamma
    gx = inv_std * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * np.mean(gxhat * xhat, axis=-1, keepdims=True))
    return gx, ggamma, gbeta


def l2_normalize(x: np.ndarray, axis: int = -1) -> Tuple[np.ndarray, np.ndarray]:
    """Unit-normalize along ``axis``; returns (output, norms)."""
    norm = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))
    bad = norm <= NORM_FLOOR
    if np.any(bad):
        rows = np.nonzero(np.any(bad, axis=axis))[0].tolist() if x.ndim > 1 else [0]
        raise DegenerateInputError('l2_normalize: input norm below 1e-12', rows=rows)
    return x / norm, norm


def l2_normalize_backward(y: np.ndarray, norm: np.ndarray, grad: np.ndarray,
                          axis: int = -1) -> np.ndarray:
    return (grad - y * np.sum(grad * y, axis=axis, keepdims=True)) / norm


def binary_cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy with probabilities clipped to [1e-7, 1 - 1e-7]."""
    _check_same_shape('cross_entropy_binary', probs, labels)
    if probs.size == 0:
        raise PreconditionError('cross_entropy_binary: empty batch')
    p = np.clip(probs, PROB_CLIP, 1.0 - PROB_CLIP)
    losses = -(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))
    return float(np.mean(losses))


def binary_cross_entropy_backward(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    inside = (probs > PROB_CLIP) & (probs < 1.0 - PROB_CLIP)
    p = np.clip(probs, PROB_CLIP, 1.0 - PROB_CLIP)
    return inside * (p - labels) / (p * (1.0 - p)) / probs.size


# ----------------------------------------------------------------------------
# Kernel registry
# ----------------------------------------------------------------------------

KERNELS: Dict[str, Callable[[], 'Kernel']] = {}


def register_kernel(name: str):
    """Class decorator adding a kernel (or composite model wrapper) to the registry."""
    def wrap(cls):
        cls.name = name
        KERNELS[name] = cls
        return cls
    return wrap


class Kernel:
    """Forward/backward contract checked by grad_check.

    ``forward`` caches what ``backward`` needs; ``backward`` returns one
    gradient per input, or None for inputs that are not differentiable
    (labels, masks).
    """

    name = 'kernel'

    def forward(self, *inputs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> List[Optional[np.ndarray]]:
        raise NotImplementedError

    def kinks(self) -> Tuple[np.ndarray, ...]:
        """ReLU pre-activations of the last forward; empty for smooth kernels."""
        return ()


@register_kernel('matmul')
class MatMul(Kernel):
    def forward(self, a, b):
        self.a, self.b = a, b
        return matmul(a, b)

    def backward(self, grad):
        return list(matmul_backward(self.a, self.b, grad))


@register_kernel('add')
class Add(Kernel):
    def forward(self, a, b):
        _check_same_shape('add', a, b)
        return a + b

    def backward(self, grad):
        return [grad.copy(), grad.copy()]


@register_kernel('concat')
class Concat(Kernel):
    def forward(self, *arrays):
        lead = arrays[0].shape[:-1]
        for a in arrays[1:]:
            if a.shape[:-1] != lead:
                raise ShapeError('concat', arrays[0].shape, a.shape)
        self.widths = [a.shape[-1] for a in arrays]
        return np.concatenate(arrays, axis=-1)

    def backward(self, grad):
        splits = np.cumsum(self.widths)[:-1]
        return [g.copy() for g in np.split(grad, splits, axis=-1)]


@register_kernel('softmax')
class Softmax(Kernel):
    def forward(self, x):
        self.y = softmax(x, axis=-1)
        return self.y

    def backward(self, grad):
        return [softmax_backward(self.y, grad)]


@register_kernel('log_softmax')
class LogSoftmax(Kernel):
    def forward(self, x):
        self.y = log_softmax(x, axis=-1)
        return self.y

    def backward(self, grad):
        return [log_softmax_backward(self.y, grad)]


@register_kernel('sigmoid')
class Sigmoid(Kernel):
    def forward(self, x):
        self.y = sigmoid(x)
        return self.y

    def backward(self, grad):
        return [sigmoid_backward(self.y, grad)]


@register_kernel('relu')
class ReLU(Kernel):
    def forward(self, x):
        self.x = x
        return relu(x)

    def backward(self, grad):
        return [relu_backward(self.x, grad)]

    def kinks(self):
        return (self.x,)


@register_kernel('layer_norm')
class LayerNorm(Kernel):
    def __init__(self, eps: float = 1e-5):
        self.eps = eps

    def forward(self, x, gamma, beta):
        y, self.cache = layer_norm(x, gamma, beta, self.eps)
        return y

    def backward(self, grad):
        return list(layer_norm_backward(self.cache, grad))


@register_kernel('l2_normalize')
class L2Normalize(Kernel):
    def forward(self, x):
        self.y, self.norm = l2_normalize(x, axis=-1)
        return self.y

    def backward(self, grad):
        return [l2_normalize_backward(self.y, self.norm, grad)]


@register_kernel('elementwise_mul')
class ElementwiseMul(Kernel):
    def forward(self, a, b):
        _check_same_shape('elementwise_mul', a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return [grad * self.b, grad * self.a]


@register_kernel('cross_entropy_binary')
class CrossEntropyBinary(Kernel):
    def forward(self, probs, labels):
        self.probs, self.labels = probs, labels
        return np.asarray(binary_cross_entropy(probs, labels))

    def backward(self, grad):
        return [float(grad) * binary_cross_entropy_backward(self.probs, self.labels), None]


# ----------------------------------------------------------------------------
# Finite-difference verification
# ----------------------------------------------------------------------------

# Entries whose perturbation flips a ReLU; more than this share fails the check.
MAX_SKIP_FRACTION = 0.1
# Sampled composite points keep every ReLU input at least this far from zero.
KINK_MARGIN = 1e-3
# Relative-error denominator floor for entries whose gradient is numerically zero.
GRAD_FLOOR = 1e-6


def relu_pattern(kinks: Sequence[np.ndarray]) -> np.ndarray:
    """On/off state of every ReLU, flattened."""
    if not kinks:
        return np.zeros(0, dtype=bool)
    return np.concatenate([np.ravel(k) > 0 for k in kinks])


def kink_margin(kinks: Sequence[np.ndarray]) -> float:
    """Smallest |pre-activation| over all ReLUs (inf when there are none)."""
    return min((float(np.min(np.abs(k))) for k in kinks if np.size(k)), default=float('inf'))


def grad_check(kernel: str, point: Sequence[np.ndarray], eps: float = 1e-5,
               tolerance: float = 1e-4, seed: int = 0,
               kernel_kwargs: Optional[Dict] = None) -> GradReport:
    """
    Compare a registered kernel's analytic gradient with finite differences.

    The scalar objective is sum(R * forward(point)) for a fixed random R. The
    numeric derivative is the Richardson combination of central differences
    at steps eps and eps/2. An entry is skipped only when one of its
    perturbations flips a ReLU reported by ``Kernel.kinks``. The check fails
    when nothing was checked or more than MAX_SKIP_FRACTION of the entries
    were skipped.

    Args:
        kernel: Registered kernel name
        point: Input arrays (copied, never mutated)
        eps: Finite-difference step
        tolerance: Pass threshold on the max relative error
        seed: Seed for the projection R
        kernel_kwargs: Constructor arguments for the kernel

    Returns:
        GradReport
    """
    if kernel not in KERNELS:
        raise PreconditionError(f"grad_check: kernel '{kernel}' is not registered")
    inputs = [np.array(p, dtype=np.float64) for p in point]
    for arr in inputs:
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"grad_check: non-finite input for kernel '{kernel}'")

    factory = KERNELS[kernel]
    kwargs = kernel_kwargs or {}
    op = factory(**kwargs)
    out = np.asarray(op.forward(*inputs), dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NumericError(f"grad_check: non-finite output from kernel '{kernel}'")
    base_pattern = relu_pattern(op.kinks())
    projection = np.asarray(np.random.default_rng(seed).standard_normal(out.shape), dtype=np.float64)
    analytic = op.backward(projection)

    def evaluate() -> Tuple[float, bool]:
        fresh = factory(**kwargs)
        value = np.asarray(fresh.forward(*inputs), dtype=np.float64)
        return float(np.sum(value * projection)), np.array_equal(relu_pattern(fresh.kinks()), base_pattern)

    max_rel = 0.0
    checked = 0
    skipped = 0
    for arr, grad in zip(inputs, analytic):
        if grad is None:
            continue
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != arr.shape:
            raise ShapeError(f"{kernel}.backward", arr.shape, grad.shape)
        it = np.nditer(arr, flags=['multi_index'])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            values = []
            smooth = True
            for step in (eps, -eps, eps / 2, -eps / 2):
                arr[idx] = orig + step
                value, same = evaluate()
                values.append(value)
                smooth = smooth and same
            arr[idx] = orig
            if not smooth:
                skipped += 1
                continue
            wide = (values[0] - values[1]) / (2.0 * eps)
            narrow = (values[2] - values[3]) / eps
            numeric = (4.0 * narrow - wide) / 3.0
            a = grad[idx]
            checked += 1
            max_rel = max(max_rel, abs(a - numeric) / max(abs(a), abs(numeric), GRAD_FLOOR))

    if not np.isfinite(max_rel):
        raise NumericError(f"grad_check: non-finite error for kernel '{kernel}'")
    total = checked + skipped
    passed = checked > 0 and skipped <= MAX_SKIP_FRACTION * total and max_rel <= tolerance
    return GradReport(op_name=kernel, max_rel_err=float(max_rel), tolerance=tolerance,
                      passed=bool(passed), n_checked=checked, n_skipped=skipped)


# ----------------------------------------------------------------------------
# AdamW
# ----------------------------------------------------------------------------

@dataclass
class AdamWState:
    """Per-parameter first/second moments and the shared step counter."""

    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    row_steps: Dict[str, np.ndarray] = field(default_factory=dict)


def sgd_adamw_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
                   state: AdamWState, lr: float, weight_decay: float = 0.0,
                   betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                   sparse_rows: Optional[Dict[str, np.ndarray]] = None) -> AdamWState:
    """
    One decoupled-weight-decay Adam update with bias correction, in place.

    Args:
        params: name -> parameter array (updated in place)
        grads: name -> gradient array of the same shape
        state: Moments and step counter (updated in place)
        lr: Learning rate (> 0)
        weight_decay: Decoupled weight decay coefficient
        betas: Moment decay rates
        eps: Denominator floor
        sparse_rows: name -> row indices for embedding tables; only those rows
            move and decay, with per-row bias correction

    Returns:
        The updated state
    """
    if lr <= 0:
        raise ConfigurationError('lr', 'must be > 0')
    beta1, beta2 = betas
    sparse_rows = sparse_rows or {}
    state.step += 1
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        if grad.shape != param.shape:
            raise ShapeError(f"adamw[{name}]", param.shape, grad.shape)
        if name not in state.m:
            state.m[name] = np.zeros_like(param)
            state.v[name] = np.zeros_like(param)

        if name in sparse_rows:
            rows = np.unique(sparse_rows[name])
            if rows.size == 0:
                continue
            if name not in state.row_steps:
                state.row_steps[name] = np.zeros(param.shape[0], dtype=np.int64)
            state.row_steps[name][rows] += 1
            t = state.row_steps[name][rows].astype(np.float64)[:, None]
            g = grad[rows]
            m = state.m[name][rows] = beta1 * state.m[name][rows] + (1 - beta1) * g
            v = state.v[name][rows] = beta2 * state.v[name][rows] + (1 - beta2) * g * g
            m_hat = m / (1 - beta1 ** t)
            v_hat = v / (1 - beta2 ** t)
            param[rows] -= lr * weight_decay * param[rows]
            param[rows] -= lr * m_hat / (np.sqrt(v_hat) + eps)
            continue

        t = state.step
        state.m[name] = beta1 * state.m[name] + (1 - beta1) * grad
        state.v[name] = beta2 * state.v[name] + (1 - beta2) * grad * grad
        m_hat = state.m[name] / (1 - beta1 ** t)
        v_hat = state.v[name] / (1 - beta2 ** t)
        param -= lr * weight_decay * param
        param -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


class AdamW:
    """AdamW over a named parameter dict of Tensors."""

    def __init__(self, params: Dict[str, Tensor], lr: float, weight_decay: float = 0.0,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 sparse: Sequence[str] = ()):
        if lr <= 0:
            raise ConfigurationError('lr', 'must be > 0')
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.sparse = set(sparse)
        self.state = AdamWState()

    def zero_grad(self):
        for tensor in self.params.values():
            tensor.grad = None

    def step(self, touched_rows: Optional[Dict[str, np.ndarray]] = None):
        """Apply one update; sparse tables move only on ``touched_rows``."""
        touched_rows = touched_rows or {}
        data = {}
        grads = {}
        for name, tensor in self.params.items():
            if not tensor.requires_grad or tensor.grad is None:
                continue
            data[name] = tensor.data
            grads[name] = tensor.grad
        sparse_rows = {name: touched_rows.get(name, np.zeros(0, dtype=np.int64))
                       for name in self.sparse if name in data}
        sgd_adamw_step(data, grads, self.state, self.lr, self.weight_decay,
                       self.betas, self.eps, sparse_rows=sparse_rows)
