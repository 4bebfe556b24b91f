import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import fd_check, naive_conv2d, naive_matmul, naive_maxpool
from sfnet.autodiff import (
    GraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    batchnorm2d,
    concat,
    conv2d,
    crop,
    elementwise,
    matmul,
    maxpool2d,
    mean,
    no_grad,
    pad,
    pool_global,
    relu,
    reshape,
    select,
    sigmoid,
    stack,
    transpose,
)

rng = np.random.default_rng(1234)


def rand(*shape):
    return rng.standard_normal(shape).astype(np.float32)


# -- elementwise ----------------------------------------------------------

def test_relu_values():
    assert relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_sigmoid_zero():
    assert sigmoid(Tensor([0.0])).data.tolist() == [0.5]


def test_sigmoid_stays_open_interval():
    out = sigmoid(Tensor([-200.0, 200.0])).data
    assert 0 < out[0] < out[1] < 1


def test_add_matches_scalar_loop():
    a, b = rand(3, 4), rand(3, 4)
    out = elementwise("add", Tensor(a), Tensor(b)).data
    ref = np.empty_like(a)
    for i in range(3):
        for j in range(4):
            ref[i, j] = a[i, j] + b[i, j]
    assert np.max(np.abs(out - ref)) == 0


@pytest.mark.parametrize("tag", ["add", "sub", "mul"])
def test_broadcast_matches_explicit_expansion(tag):
    a, b = rand(2, 3, 4), rand(1, 3, 1)
    out = elementwise(tag, Tensor(a), Tensor(b)).data
    bx = np.broadcast_to(b, a.shape).copy()
    ref = {"add": a + bx, "sub": a - bx, "mul": a * bx}[tag]
    assert np.array_equal(out, ref)


def test_broadcast_shape_mismatch():
    with pytest.raises(ShapeError):
        elementwise("add", Tensor(rand(2, 3)), Tensor(rand(2, 4)))


def test_scale_and_neg_tags():
    x = Tensor([1.0, -2.0])
    assert elementwise("scale", x, c=3.0).data.tolist() == [3.0, -6.0]
    assert elementwise("neg", x).data.tolist() == [-1.0, 2.0]


def test_unknown_tag():
    with pytest.raises(ValueError):
        elementwise("pow", Tensor([1.0]))


def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])
    big = Tensor(np.full(2, 3e38, dtype=np.float32))
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        elementwise("add", big, big)


@pytest.mark.parametrize("tag", ["add", "sub", "mul"])
def test_binary_gradients(tag):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((1, 4))
    assert fd_check(lambda x, y: elementwise(tag, x, y), [a, b]) < 1e-3


@pytest.mark.parametrize("tag", ["relu", "sigmoid", "neg"])
def test_unary_gradients(tag):
    # keep away from the relu kink
    a = rng.uniform(0.1, 2.0, (3, 4)) * rng.choice([-1, 1], (3, 4))
    assert fd_check(lambda x: elementwise(tag, x), [a]) < 1e-3


# -- matmul ---------------------------------------------------------------

def test_matmul_identity():
    x = rand(3, 5)
    assert np.array_equal(matmul(Tensor(np.eye(3)), Tensor(x)).data, x)


def test_matmul_hand():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert out.data.tolist() == [[3.0], [7.0]]


def test_matmul_triple_loop():
    a, b = rand(5, 7), rand(7, 3)
    assert np.max(np.abs(matmul(Tensor(a), Tensor(b)).data - naive_matmul(a, b))) < 1e-5


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeError):
        matmul(Tensor(rand(2, 3)), Tensor(rand(4, 2)))


def test_matmul_gradient():
    assert fd_check(matmul, [rng.standard_normal((4, 3)), rng.standard_normal((3, 2))]) < 1e-3


# -- conv2d ---------------------------------------------------------------

def test_conv_identity_kernel():
    x = rand(2, 3, 5, 5)
    w = np.zeros((3, 3, 1, 1), dtype=np.float32)
    w[np.arange(3), np.arange(3)] = 1
    assert np.array_equal(conv2d(Tensor(x), Tensor(w)).data, x)


def test_conv_all_ones_interior():
    out = conv2d(Tensor(np.full((1, 1, 5, 5), 2.0)), Tensor(np.ones((1, 1, 3, 3))))
    assert np.allclose(out.data, 18.0)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv_matches_loop_oracle(stride, padding):
    x, w, b = rand(1, 2, 6, 6), rand(3, 2, 3, 3), rand(3)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding).data
    assert np.max(np.abs(out - naive_conv2d(x, w, b, stride, padding))) < 1e-5


def test_conv_floor_extent():
    # 3x3 stride 2 pad 1 on an even extent halves it
    out = conv2d(Tensor(rand(1, 1, 8, 8)), Tensor(rand(1, 1, 3, 3)), stride=2, padding=1)
    assert out.shape == (1, 1, 4, 4)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d(Tensor(rand(1, 2, 4, 4)), Tensor(rand(1, 3, 3, 3)))


def test_conv_window_too_large():
    with pytest.raises(ShapeError):
        conv2d(Tensor(rand(1, 1, 2, 2)), Tensor(rand(1, 1, 3, 3)))


@pytest.mark.parametrize("stride,padding,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1)])
def test_conv_gradient(stride, padding, k):
    x = rng.standard_normal((2, 2, 6, 6))
    w = rng.standard_normal((3, 2, k, k))
    b = rng.standard_normal(3)
    err = fd_check(lambda x_, w_, b_: conv2d(x_, w_, b_, stride, padding), [x, w, b])
    assert err < 1e-3


# -- pooling --------------------------------------------------------------

def test_maxpool_small():
    assert maxpool2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])).data.tolist() == [[[[4.0]]]]


def test_maxpool_constant():
    out = maxpool2d(Tensor(np.full((1, 2, 4, 4), 7.0)))
    assert np.all(out.data == 7.0)


def test_maxpool_loop_oracle():
    x = rand(1, 1, 8, 8)
    assert np.array_equal(maxpool2d(Tensor(x)).data, naive_maxpool(x, 2, 2))


def test_maxpool_tie_goes_to_first():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    maxpool2d(x).sum().backward()
    assert x.grad.tolist() == [[[[1.0, 0.0], [0.0, 0.0]]]]


def test_maxpool_window_too_large():
    with pytest.raises(ShapeError):
        maxpool2d(Tensor(rand(1, 1, 2, 2)), window=3)


def test_maxpool_gradient():
    x = rng.permutation(64).reshape(1, 1, 8, 8).astype(np.float64) * 0.1
    assert fd_check(maxpool2d, [x], h=1e-4) < 1e-3


def test_global_avg_constant():
    out = pool_global(Tensor(np.full((2, 3, 4, 4), 1.5)), "avg", "spatial")
    assert out.shape == (2, 3, 1, 1) and np.all(out.data == 1.5)


def test_global_max_channel_one_hot():
    x = np.zeros((1, 4, 3, 3), dtype=np.float32)
    x[0, 2] = 5.0
    out = pool_global(Tensor(x), "max", "channel")
    assert out.shape == (1, 1, 3, 3) and np.array_equal(out.data[0, 0], x[0, 2])


def test_global_pool_loop_oracle():
    x = rand(2, 3, 4, 5)
    ref_avg_s = np.zeros((2, 3), dtype=np.float64)
    ref_max_c = np.full((2, 4, 5), -np.inf, dtype=np.float32)
    for n in range(2):
        for c in range(3):
            for i in range(4):
                for j in range(5):
                    ref_avg_s[n, c] += x[n, c, i, j] / 20
                    ref_max_c[n, i, j] = max(ref_max_c[n, i, j], x[n, c, i, j])
    assert np.max(np.abs(pool_global(Tensor(x), "avg", "spatial").data[..., 0, 0] - ref_avg_s)) < 1e-6
    assert np.array_equal(pool_global(Tensor(x), "max", "channel").data[:, 0], ref_max_c)


@pytest.mark.parametrize("kind", ["avg", "max"])
@pytest.mark.parametrize("axes", ["spatial", "channel"])
def test_global_pool_gradient(kind, axes):
    x = rng.standard_normal((2, 3, 4, 4))
    assert fd_check(lambda t: pool_global(t, kind, axes), [x]) < 1e-3


def test_global_pool_bad_args():
    with pytest.raises(ValueError):
        pool_global(Tensor(rand(1, 1, 2, 2)), "median")
    with pytest.raises(ValueError):
        pool_global(Tensor(rand(1, 1, 2, 2)), "avg", "depth")


# -- batch norm -----------------------------------------------------------

def _bn(x, gamma=None, beta=None, training=True):
    c = x.shape[1]
    g = Tensor(np.ones(c) if gamma is None else gamma)
    b = Tensor(np.zeros(c) if beta is None else beta)
    return batchnorm2d(Tensor(x), g, b, np.zeros(c), np.ones(c), training)


def test_bn_normalised_input_passes_through():
    x = rng.standard_normal((8, 2, 8, 8))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    assert np.max(np.abs(_bn(x.astype(np.float32)).data - x)) < 1e-4


def test_bn_scale_collapse():
    out = _bn(rand(2, 3, 4, 4), gamma=np.zeros(3), beta=np.full(3, 5.0))
    assert np.all(out.data == 5.0)


def test_bn_train_mean_is_zero():
    out = _bn(rand(4, 3, 5, 5) * 3 + 2).data.astype(np.float64)
    means = [sum(out[:, c].ravel().tolist()) / out[:, c].size for c in range(3)]
    assert max(abs(m) for m in means) < 1e-5


def test_bn_running_stats_update():
    x = rand(4, 2, 3, 3) + 1.0
    rm, rv = np.zeros(2), np.ones(2)
    batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, True)
    assert np.allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), atol=1e-6)
    assert np.allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1), atol=1e-5)


def test_bn_eval_uses_running_stats():
    x = rand(2, 2, 3, 3)
    rm, rv = np.array([1.0, -1.0]), np.array([4.0, 0.25])
    out = batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, False).data
    ref = (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5)
    assert np.allclose(out, ref, atol=1e-6)


def test_bn_channel_mismatch():
    with pytest.raises(ShapeError):
        _bn(rand(1, 3, 2, 2), gamma=np.ones(2), beta=np.zeros(2))


@pytest.mark.parametrize("training", [True, False])
def test_bn_gradient(training):
    x = rng.standard_normal((3, 2, 4, 4))
    gamma, beta = rng.standard_normal(2), rng.standard_normal(2)
    rm, rv = np.array([0.3, -0.2]), np.array([1.5, 0.7])

    def fn(x_, g_, b_):
        return batchnorm2d(x_, g_, b_, rm.copy(), rv.copy(), training)

    assert fd_check(fn, [x, gamma, beta]) < 1e-3


# -- structural ops -------------------------------------------------------

def test_structural_gradients():
    a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 3, 4))
    assert fd_check(lambda x: reshape(x, (6, 4)), [a]) < 1e-3
    assert fd_check(lambda x: transpose(x, (2, 0, 1)), [a]) < 1e-3
    assert fd_check(lambda x, y: concat([x, y], axis=1), [a, b]) < 1e-3
    assert fd_check(lambda x, y: stack([x, y], axis=0), [a, b]) < 1e-3
    assert fd_check(lambda x: select(x, 1, axis=1), [a]) < 1e-3
    assert fd_check(lambda x: pad(x, ((0, 0), (1, 2), (0, 1))), [a]) < 1e-3
    assert fd_check(lambda x: crop(x, (slice(None), slice(1, 3), slice(0, 2))), [a]) < 1e-3
    assert fd_check(lambda x: mean(x, axis=(0, 2)), [a]) < 1e-3


# -- backward contract ----------------------------------------------------

def test_grad_of_sum_of_squares():
    x = Tensor(rand(3, 3), requires_grad=True)
    (x * x).sum().backward()
    assert np.allclose(x.grad, 2 * x.data)


def test_dead_relu_has_zero_grad():
    x = Tensor(-np.abs(rand(4)) - 0.1, requires_grad=True)
    relu(x).sum().backward()
    assert np.all(x.grad == 0)


def test_composite_chain_gradient():
    def chain(x, w):
        h = conv2d(x, w, padding=1)
        return sigmoid(maxpool2d(relu(h) * h + h))

    x, w = rng.standard_normal((1, 2, 6, 6)), rng.standard_normal((2, 2, 3, 3))
    assert fd_check(chain, [x, w]) < 1e-3


def test_second_backward_rejected():
    x = Tensor(rand(2), requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_non_scalar_backward_rejected():
    x = Tensor(rand(2), requires_grad=True)
    with pytest.raises(GraphError):
        (x * x).backward()


def test_no_grad_builds_no_graph():
    x = Tensor(rand(2), requires_grad=True)
    with no_grad():
        y = x * x
    assert not y.requires_grad


def test_gradients_accumulate_across_uses():
    x = Tensor(rand(3), requires_grad=True)
    (x + x + x).sum().backward()
    assert np.allclose(x.grad, 3.0)


def test_retain_grad_on_intermediate():
    x = Tensor(rand(3), requires_grad=True)
    h = x * 2.0
    h.retain_grad()
    (h * h).sum().backward()
    assert np.allclose(h.grad, 2 * h.data)


def test_forward_is_deterministic():
    x, w = rand(2, 3, 8, 8), rand(4, 3, 3, 3)
    a = conv2d(Tensor(x), Tensor(w), padding=1).data
    b = conv2d(Tensor(x), Tensor(w), padding=1).data
    assert np.array_equal(a, b)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 3), st.integers(1, 4)),
              elements=st.floats(-10, 10, width=32)),
       st.integers(0, 1))
def test_broadcast_property(a, axis):
    b_shape = list(a.shape)
    b_shape[axis] = 1
    b = np.linspace(-1, 1, int(np.prod(b_shape)), dtype=np.float32).reshape(b_shape)
    out = elementwise("mul", Tensor(a), Tensor(b)).data
    assert np.array_equal(out, a * np.broadcast_to(b, a.shape))


@settings(max_examples=25, deadline=None)
@given(st.integers(4, 8), st.integers(4, 8), st.sampled_from([1, 2]), st.integers(0, 2**31 - 1))
def test_maxpool_property_matches_oracle(h, w, s, seed):
    x = np.random.default_rng(seed).standard_normal((1, 2, h, w)).astype(np.float32)
    assert np.array_equal(maxpool2d(Tensor(x), 2, s).data, naive_maxpool(x, 2, s))
