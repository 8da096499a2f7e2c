import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcases import OP_CASES
from helpers import (
    GRAD_RTOL,
    conv2d_direct,
    conv2d_transpose_direct,
    gradcheck,
)
from rsim.tensor import (
    BN_EPS,
    Graph,
    RunningStats,
    ShapeError,
    Tensor,
    backward,
    batchnorm2d,
    concat_channels,
    conv2d,
    conv2d_transpose,
    dense,
    flatten,
    maxpool2,
    no_grad,
    relu,
    sigmoid,
    softmax2,
)

SEEDS = range(10)
finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=float), requires_grad=grad)


# --------------------------------------------------------------------------
# conv2d


def test_conv2d_identity_kernel():
    out = conv2d(T(np.ones((3, 3, 1))), T(np.ones((1, 1, 1, 1))), T([0.0]))
    assert out.shape == (3, 3, 1)
    np.testing.assert_array_equal(out.data, np.ones((3, 3, 1)))


def test_conv2d_diagonal_kernel_sums_diagonal():
    x = T(np.array([[1, 2], [3, 4]], dtype=float)[:, :, None])
    w = T(np.array([[1, 0], [0, 1]], dtype=float)[:, :, None, None])
    out = conv2d(x, w, T([0.0]))
    assert out.shape == (1, 1, 1)
    assert out.data[0, 0, 0] == 5.0


def test_conv2d_strided_shape():
    out = conv2d(T(np.zeros((8, 8, 4))), T(np.zeros((3, 3, 4, 8))), T(np.zeros(8)), stride=2, padding=1)
    assert out.shape == (4, 4, 8)


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d(T(np.zeros((4, 4, 3))), T(np.zeros((3, 3, 2, 1))), T([0.0]))


def test_conv2d_rejects_oversized_kernel():
    with pytest.raises(ShapeError):
        conv2d(T(np.zeros((2, 2, 1))), T(np.zeros((5, 5, 1, 1))), T([0.0]))


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d_matches_direct_loops(seed):
    rng = np.random.default_rng(seed)
    k, s, p = rng.integers(1, 4), rng.integers(1, 3), rng.integers(0, 2)
    x = rng.standard_normal((7, 6, 2))
    w = rng.standard_normal((k, k, 2, 3))
    b = rng.standard_normal(3)
    got = conv2d(T(x), T(w), T(b), s, p).data
    np.testing.assert_allclose(got, conv2d_direct(x, w, b, s, p), rtol=1e-12, atol=1e-12)


def test_conv2d_batched_matches_single():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 5, 5, 2))
    w, b = T(rng.standard_normal((3, 3, 2, 4))), T(rng.standard_normal(4))
    batched = conv2d(T(x), w, b, 2, 1).data
    for i in range(3):
        np.testing.assert_array_equal(batched[i], conv2d(T(x[i]), w, b, 2, 1).data)


# --------------------------------------------------------------------------
# conv2d_transpose


def test_conv2d_transpose_stamps_kernel():
    out = conv2d_transpose(T([[[2.0]]]), T(np.ones((2, 2, 1, 1))), T([0.0]))
    np.testing.assert_array_equal(out.data, np.full((2, 2, 1), 2.0))


def test_conv2d_transpose_shape():
    out = conv2d_transpose(T(np.zeros((4, 4, 8))), T(np.zeros((3, 3, 4, 8))), T(np.zeros(4)), 2, 1)
    assert out.shape == (7, 7, 4)


def test_conv2d_transpose_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d_transpose(T(np.zeros((4, 4, 3))), T(np.zeros((3, 3, 4, 8))), T(np.zeros(4)))


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d_transpose_matches_scatter_loops(seed):
    rng = np.random.default_rng(seed)
    k, s, p = rng.integers(1, 5), rng.integers(1, 3), rng.integers(0, 2)
    op = rng.integers(0, s)
    y = rng.standard_normal((4, 5, 3))
    w = rng.standard_normal((k, k, 2, 3))
    b = rng.standard_normal(2)
    if (4 - 1) * s - 2 * p + k + op < 1:
        return
    got = conv2d_transpose(T(y), T(w), T(b), s, p, op).data
    np.testing.assert_allclose(got, conv2d_transpose_direct(y, w, b, s, p, op), rtol=1e-12, atol=1e-12)


def _adjoint_pair(rng):
    k = int(rng.integers(1, 5))
    s = int(rng.integers(1, 4))
    p = int(rng.integers(0, k))
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    side = int(rng.integers(max(k - 2 * p, 1), 10))
    x = rng.standard_normal((side, side, cin))
    w = rng.standard_normal((k, k, cin, cout))
    y_conv = conv2d(T(x), T(w), T(np.zeros(cout)), s, p)
    y = rng.standard_normal(y_conv.shape)
    # output_padding restores the rows a strided conv drops
    op = side - ((y_conv.shape[0] - 1) * s - 2 * p + k)
    xt = conv2d_transpose(T(y), T(w), T(np.zeros(cin)), s, p, op).data
    assert xt.shape == x.shape
    return float(np.sum(y_conv.data * y)), float(np.sum(x * xt))


@pytest.mark.parametrize("seed", range(100))
def test_adjoint_identity_random_geometry(seed):
    lhs, rhs = _adjoint_pair(np.random.default_rng(seed))
    assert abs(lhs - rhs) <= 1e-9 * max(1.0, abs(lhs), abs(rhs))


# --------------------------------------------------------------------------
# maxpool2


def test_maxpool_window_max():
    out = maxpool2(T(np.array([[1, 2], [3, 4]], dtype=float)[:, :, None]))
    assert out.shape == (1, 1, 1) and out.data[0, 0, 0] == 4.0


def test_maxpool_constant():
    out = maxpool2(T(np.full((4, 6, 2), 3.5)))
    np.testing.assert_array_equal(out.data, np.full((2, 3, 2), 3.5))


def test_maxpool_odd_dimension():
    with pytest.raises(ShapeError):
        maxpool2(T(np.zeros((3, 4, 1))))


def test_maxpool_gradient_routes_to_argmax():
    rng = np.random.default_rng(3)
    x = T(rng.standard_normal((4, 4, 2)), grad=True)
    backward(maxpool2(x).sum())
    expected = np.zeros((4, 4, 2))
    for i in range(2):
        for j in range(2):
            for c in range(2):
                win = x.data[2 * i:2 * i + 2, 2 * j:2 * j + 2, c]
                a, b = np.unravel_index(np.argmax(win), (2, 2))
                expected[2 * i + a, 2 * j + b, c] = 1.0
    np.testing.assert_array_equal(x.grad, expected)


def test_maxpool_ties_go_to_first_cell():
    x = T(np.ones((2, 2, 1)), grad=True)
    backward(maxpool2(x).sum())
    np.testing.assert_array_equal(x.grad[:, :, 0], [[1, 0], [0, 0]])


# --------------------------------------------------------------------------
# batchnorm2d


def _bn(x, gamma, beta, training=True, stats=None):
    c = x.shape[-1]
    stats = stats or RunningStats.fresh(c)
    return batchnorm2d(T(x), T(gamma), T(beta), stats, training), stats


def test_batchnorm_standardised_input_is_near_identity():
    # exact output is x / sqrt(1 + eps); the shift is eps/2 * |x| ~ 5e-6 |x|
    x = np.array([-1.0, 1.0, -1.0, 1.0]).reshape(2, 1, 2, 1)
    out, _ = _bn(x, [1.0], [0.0])
    np.testing.assert_allclose(out.data, x / np.sqrt(1 + BN_EPS), rtol=0, atol=1e-15)
    assert np.max(np.abs(out.data - x)) < 5e-6 * np.max(np.abs(x)) + 1e-12


def test_batchnorm_zero_gamma_gives_beta():
    rng = np.random.default_rng(0)
    out, _ = _bn(rng.standard_normal((3, 4, 4, 2)), [0.0, 0.0], [0.5, -2.0])
    np.testing.assert_array_equal(out.data[..., 0], 0.5)
    np.testing.assert_array_equal(out.data[..., 1], -2.0)


@pytest.mark.parametrize("seed", SEEDS)
def test_batchnorm_output_moments(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(3.0, 5.0, size=(4, 6, 6, 3))
    gamma, beta = rng.uniform(0.5, 2, 3), rng.standard_normal(3)
    out, _ = _bn(x, gamma, beta)
    np.testing.assert_allclose(out.data.mean(axis=(0, 1, 2)), beta, atol=1e-10)
    np.testing.assert_allclose(out.data.std(axis=(0, 1, 2)), gamma, rtol=1e-5)


def test_batchnorm_running_stats_update_and_eval():
    rng = np.random.default_rng(1)
    x = rng.normal(2.0, 3.0, size=(4, 3, 3, 1))
    _, stats = _bn(x, [1.0], [0.0])
    n = x.size
    np.testing.assert_allclose(stats.mean, 0.1 * x.mean())
    np.testing.assert_allclose(stats.var, 0.9 + 0.1 * x.var() * n / (n - 1))
    out, _ = _bn(x, [1.0], [0.0], training=False, stats=stats)
    np.testing.assert_allclose(out.data, (x - stats.mean) / np.sqrt(stats.var + BN_EPS))


def test_batchnorm_train_mode_needs_two_values():
    with pytest.raises(ShapeError):
        _bn(np.zeros((1, 1, 1, 2)), [1.0, 1.0], [0.0, 0.0])


# --------------------------------------------------------------------------
# activations and layout


def test_relu_values():
    np.testing.assert_array_equal(relu(T([-1.0, 0.0, 2.0])).data, [0, 0, 2])


@given(arrays(np.float64, st.integers(1, 20), elements=finite))
def test_relu_idempotent(x):
    once = relu(T(x)).data
    np.testing.assert_array_equal(relu(T(once)).data, once)


def test_sigmoid_values_and_extremes():
    out = sigmoid(T([0.0, 800.0, -800.0])).data
    np.testing.assert_allclose(out, [0.5, 1.0, 0.0])
    assert np.all(np.isfinite(out))


def test_softmax2_symmetric():
    np.testing.assert_array_equal(softmax2(T([0.0, 0.0])).data, [0.5, 0.5])


@given(finite, finite)
def test_softmax2_normalised(a, b):
    p = softmax2(T([a, b])).data
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all((p >= 0) & (p <= 1))


def test_softmax2_needs_two_logits():
    with pytest.raises(ShapeError):
        softmax2(T([1.0, 2.0, 3.0]))


def test_dense_identity():
    x = np.array([1.5, -2.0, 3.0])
    np.testing.assert_array_equal(dense(T(x), T(np.eye(3)), T(np.zeros(3))).data, x)


def test_dense_shape_mismatch():
    with pytest.raises(ShapeError):
        dense(T(np.zeros(3)), T(np.zeros((2, 4))), T(np.zeros(2)))


def test_concat_channels_paper_geometry():
    out = concat_channels(T(np.zeros((8, 8, 512))), T(np.ones((8, 8, 512))))
    assert out.shape == (8, 8, 1024)
    assert out.data[..., :512].sum() == 0 and out.data[..., 512:].min() == 1


def test_concat_channels_spatial_mismatch():
    with pytest.raises(ShapeError):
        concat_channels(T(np.zeros((8, 8, 2))), T(np.zeros((4, 4, 2))))


def test_flatten_row_major():
    np.testing.assert_array_equal(flatten(T([[1.0, 2.0], [3.0, 4.0]])).data, [1, 2, 3, 4])


# --------------------------------------------------------------------------
# backward


def test_backward_sum_gives_ones():
    x = T(np.random.default_rng(0).standard_normal((2, 3, 4)), grad=True)
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_square():
    x = T([1.0, 2.0], grad=True)
    backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    x = T([1.0, 2.0], grad=True)
    with pytest.raises(ShapeError):
        backward(x * x)


def test_fan_out_accumulates():
    x = T([3.0], grad=True)
    y = x * x + x * 2.0 + x
    backward(y.sum())
    np.testing.assert_allclose(x.grad, [2 * 3.0 + 3.0])


def test_leaf_grads_accumulate_across_calls():
    x = T([1.0, 2.0], grad=True)
    backward(x.sum())
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_graph_is_topological_and_unique():
    x = T([1.0, 2.0], grad=True)
    a = x * x
    b = a + x
    loss = (a * b).sum()
    g = Graph.trace(loss)
    pos = {id(n): i for i, n in enumerate(g.nodes)}
    assert len(pos) == len(g.nodes)
    for n in g.nodes:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]


def test_no_grad_records_nothing():
    x = T([1.0], grad=True)
    with no_grad():
        y = x * x
    assert not y.requires_grad and y._parents == ()


# --------------------------------------------------------------------------
# gradient suite against central differences


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients(name, seed):
    build, tensors, max_entries = OP_CASES[name](seed)
    assert gradcheck(build, tensors, max_entries=max_entries) < GRAD_RTOL


# --------------------------------------------------------------------------
# determinism


def test_forward_backward_bit_identical():
    def run():
        rng = np.random.default_rng(42)
        x = T(rng.standard_normal((2, 6, 6, 3)), True)
        w = T(rng.standard_normal((3, 3, 3, 4)), True)
        b = T(np.zeros(4), True)
        y = maxpool2(relu(conv2d(x, w, b, 1, 1)))
        loss = (y * y).sum()
        backward(loss)
        return loss.data.copy(), x.grad.copy(), w.grad.copy()

    r1, r2 = run(), run()
    for a, b in zip(r1, r2):
        np.testing.assert_array_equal(a, b)


def test_forward_values_stay_finite():
    rng = np.random.default_rng(0)
    x = T(rng.standard_normal((2, 8, 8, 3)) * 100)
    y = sigmoid(conv2d(x, T(rng.standard_normal((3, 3, 3, 2))), T(np.zeros(2)), 1, 1))
    assert np.all(np.isfinite(y.data))
