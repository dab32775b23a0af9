import numpy as np
import pytest

import pipeline
from content_encoder import PROJECTION_NORM_MARGIN, EncoderChainKernel
from ctr_ranker import RankerV5Kernel
from diff_kernels import (KERNELS, KINK_MARGIN, AdamW, AdamWState, Tensor, binary_cross_entropy,
                          grad_check, kink_margin, l2_normalize, layer_norm, masked_softmax,
                          sgd_adamw_step, sigmoid, softmax)
from errors import ConfigurationError, DegenerateInputError, PreconditionError, ShapeError
from pipeline import gradcheck_point, gradient_suite

BASIC_KERNELS = ('matmul', 'add', 'concat', 'softmax', 'log_softmax', 'sigmoid', 'relu',
                 'layer_norm', 'l2_normalize', 'elementwise_mul', 'cross_entropy_binary')
COMPOSITES = ('pal_loss', 'fine_adaptor', 'gate_fuse', 'target_attention',
              'feature_interaction', 'encoder_chain', 'ranker_v5')


def test_every_kernel_is_registered():
    for name in BASIC_KERNELS + COMPOSITES:
        assert name in KERNELS


@pytest.mark.parametrize('kernel', BASIC_KERNELS)
def test_basic_kernels_pass_gradient_check(kernel):
    for report in gradient_suite(n_points=3, seed=7, kernels=[kernel]):
        assert report.passed, report.to_dict()
        assert report.n_checked > 0


@pytest.mark.parametrize('kernel', BASIC_KERNELS + COMPOSITES)
def test_every_kernel_passes_at_ten_points(kernel):
    reports = gradient_suite(n_points=10, seed=0, kernels=[kernel])
    assert len(reports) == 10
    for report in reports:
        assert report.passed, report.to_dict()
        assert report.n_checked > 0
        assert report.n_skipped <= 0.1 * (report.n_checked + report.n_skipped)


@pytest.mark.parametrize('seed', [7, 10, 34, 38])
def test_encoder_chain_passes_at_previously_degenerate_seeds(seed):
    (report,) = gradient_suite(n_points=1, seed=seed, kernels=['encoder_chain'])
    assert report.passed, report.to_dict()
    assert report.error == ''


@pytest.mark.parametrize('seed', range(12))
def test_encoder_chain_points_are_well_conditioned(seed):
    kernel = EncoderChainKernel(seed)
    kernel.forward(*EncoderChainKernel.sample_point(seed))
    assert kink_margin(kernel.kinks()) >= KINK_MARGIN
    assert np.min(kernel.cache['phi'][4]) >= PROJECTION_NORM_MARGIN


@pytest.mark.parametrize('seed', range(6))
def test_ranker_points_keep_relu_inputs_off_zero(seed):
    kernel = RankerV5Kernel(seed)
    kernel.forward(*RankerV5Kernel.sample_point(seed))
    assert kink_margin(kernel.kinks()) >= KINK_MARGIN


class _HalfSquare:
    """x * x with the factor 2 missing from the backward."""

    def forward(self, x):
        self.x = x
        return x * x

    def backward(self, grad):
        return [grad * self.x]

    def kinks(self):
        return ()


def test_wrong_backward_near_a_stationary_point_fails(monkeypatch):
    monkeypatch.setitem(KERNELS, 'half_square', _HalfSquare)
    report = grad_check('half_square', [np.array([0.01, -0.02, 0.03])])
    assert not report.passed
    assert report.n_checked == 3
    assert report.n_skipped == 0
    assert report.max_rel_err == pytest.approx(0.5, rel=1e-3)


def test_relu_skips_only_entries_on_the_kink():
    x = np.linspace(-2.0, 2.0, 20).reshape(4, 5)
    x[0, 0] = 0.0
    report = grad_check('relu', [x])
    assert report.n_skipped == 1
    assert report.n_checked == 19
    assert report.passed


def test_a_check_with_nothing_checked_fails():
    report = grad_check('relu', [np.zeros((2, 3))])
    assert report.n_checked == 0
    assert report.n_skipped == 6
    assert not report.passed


def test_suite_reports_a_point_that_cannot_be_built(monkeypatch):
    def degenerate(kernel, seed):
        raise DegenerateInputError('project_phi: projection collapsed to zero')

    monkeypatch.setattr(pipeline, 'gradcheck_point', degenerate)
    reports = gradient_suite(n_points=2, kernels=['encoder_chain'])
    assert [r.passed for r in reports] == [False, False]
    assert 'DegenerateInputError' in reports[0].error


def test_grad_check_catches_a_wrong_backward(monkeypatch):
    monkeypatch.setitem(KERNELS, 'half_square', _HalfSquare)
    report = grad_check('half_square', [np.array([0.5, -1.5, 2.0])])
    assert not report.passed
    assert report.max_rel_err > 0.1


def test_grad_check_rejects_unknown_kernel():
    with pytest.raises(PreconditionError):
        grad_check('no_such_kernel', [np.zeros(2)])


def test_grad_check_does_not_mutate_the_point():
    point, kwargs = gradcheck_point('matmul', 0)
    before = [p.copy() for p in point]
    grad_check('matmul', point, kernel_kwargs=kwargs)
    for a, b in zip(point, before):
        np.testing.assert_array_equal(a, b)


def test_softmax_rows_sum_to_one_and_survive_large_inputs():
    x = np.array([[1000.0, 1001.0, 999.0], [-5.0, 0.0, 5.0]])
    y = softmax(x)
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(np.isfinite(y))


def test_masked_softmax_gives_zero_rows_for_empty_masks():
    x = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    mask = np.array([[True, False, True], [False, False, False]])
    y = masked_softmax(x, mask)
    assert y[0, 1] == 0.0
    np.testing.assert_allclose(y[0].sum(), 1.0)
    np.testing.assert_array_equal(y[1], 0.0)


def test_sigmoid_is_stable_at_extremes():
    y = sigmoid(np.array([-800.0, 0.0, 800.0]))
    np.testing.assert_allclose(y, [0.0, 0.5, 1.0], atol=1e-300)
    assert np.all(np.isfinite(y))


def test_layer_norm_output_is_standardized():
    x = np.random.default_rng(0).standard_normal((4, 6)) * 3.0 + 2.0
    y, _ = layer_norm(x, np.ones(6), np.zeros(6))
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-4)


def test_layer_norm_rejects_mismatched_gain():
    with pytest.raises(ShapeError):
        layer_norm(np.zeros((2, 3)), np.ones(4), np.zeros(3))


def test_l2_normalize_rejects_zero_rows():
    with pytest.raises(DegenerateInputError) as info:
        l2_normalize(np.array([[1.0, 0.0], [0.0, 0.0]]))
    assert info.value.rows == [1]


def test_binary_cross_entropy_of_a_coin_flip_is_log_two():
    probs = np.full(4, 0.5)
    labels = np.array([0.0, 1.0, 1.0, 0.0])
    assert binary_cross_entropy(probs, labels) == pytest.approx(np.log(2.0), abs=1e-12)


def test_adamw_reaches_the_minimum_of_a_2d_quadratic():
    argmin = np.array([1.5, -0.5])
    x = Tensor(np.zeros(2))
    optimizer = AdamW({'x': x}, lr=0.1, betas=(0.5, 0.999))
    for _ in range(100):
        optimizer.zero_grad()
        x.grad = 2.0 * (x.data - argmin)
        optimizer.step()
    np.testing.assert_allclose(x.data, argmin, atol=1e-3)


def test_weight_decay_alone_shrinks_geometrically():
    params = {'w': np.array([1.0, -4.0])}
    state = AdamWState()
    for _ in range(10):
        sgd_adamw_step(params, {'w': np.zeros(2)}, state, lr=0.1, weight_decay=0.5)
    np.testing.assert_allclose(params['w'], np.array([1.0, -4.0]) * 0.95 ** 10, rtol=1e-12)


def test_sparse_rows_leave_untouched_rows_bitwise_equal():
    table = np.random.default_rng(0).standard_normal((5, 3))
    original = table.copy()
    tensor = Tensor(table)
    optimizer = AdamW({'emb': tensor}, lr=0.05, weight_decay=0.1, sparse=('emb',))
    for _ in range(3):
        optimizer.zero_grad()
        tensor.grad = np.ones_like(tensor.data)
        optimizer.step({'emb': np.array([1, 3, 3])})
    for row in (0, 2, 4):
        np.testing.assert_array_equal(tensor.data[row], original[row])
    assert not np.array_equal(tensor.data[1], original[1])
    assert not np.array_equal(tensor.data[3], original[3])


def test_adamw_rejects_non_positive_learning_rate():
    with pytest.raises(ConfigurationError):
        AdamW({'x': Tensor(np.zeros(1))}, lr=0.0)
    with pytest.raises(ConfigurationError):
        sgd_adamw_step({'x': np.zeros(1)}, {'x': np.zeros(1)}, AdamWState(), lr=-1.0)
