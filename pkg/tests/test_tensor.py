import numpy as np
import pytest

from spikeforge import tensor as T
from spikeforge.graph import mse_loss
from spikeforge.neuron import NeuronParams, soft_lif
from spikeforge.tensor import Adam, AdamState, ShapeError, Tensor, adam_step

from oracles import central_difference, naive_conv2d, rel_error


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


@pytest.fixture(params=[True, False], ids=["torch", "numpy"])
def backend(request, monkeypatch):
    if request.param and T.torch is None:
        pytest.skip("torch not installed")
    monkeypatch.setattr(T, "USE_TORCH_KERNELS", request.param)
    return request.param


# -- construction ---------------------------------------------------------

def test_default_dtype_is_float32_and_float64_is_kept():
    assert Tensor([1, 2]).dtype == np.float32
    assert Tensor(np.zeros(2)).dtype == np.float64


def test_backward_of_sum_is_all_ones():
    x = t64(np.random.default_rng(0).normal(size=(3, 4)))
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_rejects_non_scalar():
    x = t64([1.0, 2.0])
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_shared_subexpression_gets_both_contributions():
    x = t64([3.0])
    y = x * x + x
    y.sum().backward()
    assert x.grad[0] == pytest.approx(7.0)


def test_deep_chain_does_not_recurse():
    x = t64([1.0])
    y = x
    for _ in range(5000):
        y = y + 0.0
    y.sum().backward()
    assert x.grad[0] == 1.0


# -- conv2d ---------------------------------------------------------------

def test_conv2d_identity_kernel():
    x = np.ones((1, 1, 3, 3), np.float32)
    out = T.conv2d(x, np.ones((1, 1, 1, 1), np.float32))
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_hand_dot_product():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]], np.float32)
    k = np.array([[[[1.0, 0.0], [0.0, 1.0]]]], np.float32)
    assert T.conv2d(x, k).data.tolist() == [[[5.0]]]


@pytest.mark.parametrize("stride,padding,ksize", [
    (2, "valid", 3), (1, "same", 3), (1, "valid", 3), (2, "valid", 2), (1, "same", 2),
])
def test_conv2d_matches_loop_oracle(backend, stride, padding, ksize):
    rng = np.random.default_rng(ksize + stride)
    x = rng.normal(size=(3, 8, 8)).astype(np.float32)
    k = rng.normal(size=(4, 3, ksize, ksize)).astype(np.float32)
    got = T.conv2d(x, k, stride=stride, padding=padding).data
    want = naive_conv2d(x.astype(np.float64), k.astype(np.float64), stride, padding)
    assert got.shape == want.shape
    assert np.max(np.abs(got - want)) <= 1e-5


def test_conv2d_output_size_formula():
    x = np.zeros((2, 1, 9, 7), np.float32)
    out = T.conv2d(x, np.zeros((5, 1, 3, 3), np.float32), stride=2)
    assert out.shape == (2, 5, (9 - 3) // 2 + 1, (7 - 3) // 2 + 1)


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)))


def test_conv2d_kernel_larger_than_input():
    with pytest.raises(ShapeError):
        T.conv2d(np.zeros((1, 2, 2)), np.zeros((1, 1, 3, 3)))


# -- conv2d_transpose -----------------------------------------------------

def test_conv_transpose_hand_expansion():
    k = np.array([[[[1.0, 2.0], [3.0, 4.0]]]], np.float32)
    out = T.conv2d_transpose(np.ones((1, 1, 1), np.float32), k)
    assert out.data.tolist() == [[[1.0, 2.0], [3.0, 4.0]]]


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_transpose_is_adjoint_of_conv(backend, stride):
    rng = np.random.default_rng(stride)
    x = rng.normal(size=(2, 3, 8, 8))
    k = rng.normal(size=(4, 3, 2, 2))
    y_shape = T.conv2d(x, k, stride=stride).shape
    y = rng.normal(size=y_shape)
    lhs = np.sum(T.conv2d(x, k, stride=stride).data * y)
    rhs = np.sum(x * T.conv2d_transpose(y, k, stride=stride).data)
    assert abs(lhs - rhs) <= 1e-4 * max(1.0, abs(lhs))


def test_conv_transpose_stride_two_doubles_size():
    out = T.conv2d_transpose(np.zeros((3, 6, 4), np.float32), np.zeros((3, 2, 2, 2), np.float32),
                             stride=2)
    assert out.shape == (2, 12, 8)


def test_conv_transpose_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d_transpose(np.zeros((2, 3, 3)), np.zeros((3, 1, 2, 2)))


# -- pooling and dense ------------------------------------------------------

def test_avg_pool_constant_and_hand_value():
    assert np.all(T.avg_pool2d(np.full((2, 4, 4), 3.5), 2).data == 3.5)
    assert T.avg_pool2d(np.array([[[1.0, 2.0], [3.0, 4.0]]]), 2).data.tolist() == [[[2.5]]]


def test_avg_pool_conserves_mass():
    x = np.random.default_rng(1).normal(size=(2, 3, 8, 8)).astype(np.float32)
    out = T.avg_pool2d(x, 4).data
    assert abs(out.sum() * 16 - x.sum()) <= 1e-4 * max(1.0, abs(x.sum()))


def test_avg_pool_rejects_indivisible():
    with pytest.raises(ShapeError):
        T.avg_pool2d(np.zeros((1, 5, 4)), 2)


def test_dense_identity_and_hand_value():
    x = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(T.dense(x, np.eye(3), np.zeros(3)).data, x)
    out = T.dense(np.array([3.0, 4.0]), np.array([[1.0, 2.0]]), np.array([1.0]))
    assert out.data.tolist() == [12.0]


def test_dense_input_gradient_is_column_sums():
    rng = np.random.default_rng(2)
    W = rng.normal(size=(5, 3))
    x = t64(rng.normal(size=3))
    T.dense(x, W, np.zeros(5)).sum().backward()
    assert np.max(np.abs(x.grad - W.sum(axis=0))) <= 1e-5


def test_dense_shape_mismatch():
    with pytest.raises(ShapeError):
        T.dense(np.zeros(3), np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        T.dense(np.zeros(4), np.zeros((2, 4)), np.zeros(3))


# -- finite-difference checks ---------------------------------------------

def _check_grads(build, arrays, seed, tol=1e-3):
    """``build(*tensors)`` returns a scalar Tensor; compare all input gradients."""
    tensors = [t64(a) for a in arrays]
    build(*tensors).backward()
    for i, a in enumerate(arrays):
        def f(v, i=i):
            args = [t64(b, grad=False) for b in arrays]
            args[i] = t64(v, grad=False)
            return build(*args).item()
        num = central_difference(f, a)
        assert rel_error(tensors[i].grad, num) < tol, f"input {i}, seed {seed}"


SEEDS = range(20)


@pytest.mark.parametrize("seed", SEEDS)
def test_fd_conv2d(seed):
    rng = np.random.default_rng(seed)
    stride = 1 + seed % 2
    padding = "same" if stride == 1 and seed % 4 == 1 else "valid"
    x = rng.normal(size=(2, 2, 5, 5))
    k = rng.normal(size=(3, 2, 2 + seed % 2, 2 + seed % 2))
    b = rng.normal(size=3)
    w = rng.normal(size=T.conv2d(x, k, stride, padding).shape)
    _check_grads(lambda x, k, b: (T.conv2d(x, k, stride, padding, b) * w).sum(), [x, k, b], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_fd_conv2d_transpose(seed):
    rng = np.random.default_rng(100 + seed)
    stride = 1 + seed % 2
    x = rng.normal(size=(2, 3, 3, 3))
    k = rng.normal(size=(3, 2, 2, 2))
    b = rng.normal(size=2)
    w = rng.normal(size=T.conv2d_transpose(x, k, stride).shape)
    _check_grads(lambda x, k, b: (T.conv2d_transpose(x, k, stride, b) * w).sum(), [x, k, b], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_fd_avg_pool(seed):
    rng = np.random.default_rng(200 + seed)
    x = rng.normal(size=(2, 2, 4, 4))
    w = rng.normal(size=(2, 2, 2, 2))
    _check_grads(lambda x: (T.avg_pool2d(x, 2) * w).sum(), [x], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_fd_dense_mse(seed):
    rng = np.random.default_rng(300 + seed)
    x, W, b = rng.normal(size=(4, 5)), rng.normal(size=(3, 5)), rng.normal(size=3)
    target = rng.normal(size=(4, 3))
    _check_grads(lambda x, W, b: mse_loss(T.dense(x, W, b), target), [x, W, b], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_fd_elementwise_ops(seed):
    rng = np.random.default_rng(400 + seed)
    a = rng.normal(size=(3, 4))
    b = rng.uniform(0.5, 2.0, size=(4,))

    def f(a, b):
        y = T.sigmoid(a) * b + T.softplus(a) - T.exp(a * 0.3) / b + T.log(b) * a
        return (T.power(y * y + 1.0, 0.5)).mean()
    _check_grads(f, [a, b], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_fd_conv_softlif_mse_chain(seed):
    rng = np.random.default_rng(500 + seed)
    p = NeuronParams(amplitude=0.01)
    x = rng.uniform(0, 1, size=(2, 1, 5, 5))
    k = rng.normal(0, 0.5, size=(2, 1, 3, 3))
    b = np.full(2, 1.5)
    target = rng.uniform(0, 1, size=(2, 2, 5, 5))
    _check_grads(lambda x, k, b: mse_loss(soft_lif(T.conv2d(x, k, 1, "same", b), p), target),
                 [x, k, b], seed)


def test_mse_dense_three_units_fd():
    rng = np.random.default_rng(7)
    x, W, b, y = rng.normal(size=4), rng.normal(size=(3, 4)), rng.normal(size=3), rng.normal(size=3)
    _check_grads(lambda W, b: mse_loss(T.dense(x, W, b), y), [W, b], 0)


def test_straight_through_value_and_gradient():
    s = t64([1.0, 2.0])
    out = T.straight_through(s * 3.0, np.array([10.0, 20.0]))
    assert out.data.tolist() == [10.0, 20.0]
    out.sum().backward()
    assert s.grad.tolist() == [3.0, 3.0]


def test_ops_stay_finite():
    x = Tensor(np.array([-1e4, 0.0, 1e4]))
    for y in (T.sigmoid(x), T.softplus(x), T.relu(x)):
        assert np.isfinite(y.data).all()


# -- Adam -----------------------------------------------------------------

def test_adam_zero_gradient_keeps_param():
    new, st = adam_step(AdamState(lr=0.01), np.array([1.0]), np.array([0.0]))
    assert new[0] == 1.0 and st.step == 1


def test_adam_first_step_moves_by_lr():
    new, st = adam_step(AdamState(lr=0.01), np.array([1.0]), np.array([2.0]))
    assert new[0] == pytest.approx(0.99, abs=1e-8)
    assert st.m.shape == st.v.shape == (1,)


def test_adam_step_count_increases():
    st = AdamState()
    p = np.zeros(3)
    for i in range(5):
        p, st = adam_step(st, p, np.ones(3))
        assert st.step == i + 1


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step(AdamState(), np.zeros(3), np.zeros(2))


def test_adam_minimizes_quadratic():
    w = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([w], lr=0.01)
    for step in range(200):
        opt.zero_grad()
        (w * w).sum().backward()
        opt.step()
        if abs(w.data[0]) < 0.1:
            break
    assert abs(w.data[0]) < 0.1
