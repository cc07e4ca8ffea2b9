import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trajdistill import tensor as T
from trajdistill.errors import ContractError, DimensionError, InputError
from trajdistill.tensor import Tensor

from conftest import numeric_grad


def norm_rel(a, f):
    a, f = np.asarray(a, np.float64), np.asarray(f, np.float64)
    return float(np.max(np.abs(a - f)) / max(np.max(np.abs(f)), 1e-12))


def check_op(fn, *arrays, tol, h=1e-5, seed=0):
    """Analytic vs central-difference gradient of sum(w * fn(*inputs)) for each input."""
    with T.default_dtype(np.float64):
        out_shape = fn(*[Tensor(a) for a in arrays]).shape
        w = np.random.default_rng(seed).normal(size=out_shape)

        def scalar(*arrs):
            with T.no_grad():
                return float(np.sum(fn(*[Tensor(a) for a in arrs]).data * w))

        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        loss = T.sum(fn(*leaves) * Tensor(w))
        grads = T.grad(loss, leaves)
        for k, (a, g) in enumerate(zip(arrays, grads)):
            def f(x, k=k):
                arrs = list(arrays)
                arrs[k] = x
                return scalar(*arrs)
            assert norm_rel(g.data, numeric_grad(f, a, h)) < tol, f"input {k}"


def naive_conv(x, k):
    b, c, h, w = x.shape
    o = k.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((b, o, h, w))
    for n in range(b):
        for oc in range(o):
            for i in range(h):
                for j in range(w):
                    for ic in range(c):
                        for di in range(3):
                            for dj in range(3):
                                out[n, oc, i, j] += xp[n, ic, i + di, j + dj] * k[oc, ic, di, dj]
    return out


# -- matmul ---------------------------------------------------------------------

def test_matmul_identity():
    a = Tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal((Tensor(np.eye(2)) @ a).data, [[1, 2], [3, 4]])


def test_matmul_orthogonal_pick():
    np.testing.assert_array_equal((Tensor([[1, 0]]) @ Tensor([[0], [5]])).data, [[0]])


def test_matmul_gradient_vs_finite_differences(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    check_op(lambda x, y: x @ y, a, b, tol=1e-4)


def test_matmul_shape_mismatch_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


# -- conv2d ---------------------------------------------------------------------

def test_conv_zero_kernel():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4, 4)))
    assert not np.any(T.conv2d(x, Tensor(np.zeros((5, 3, 3, 3)))).data)


def test_conv_identity_kernel_single_pixel():
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    out = T.conv2d(Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor(k))
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 2.0


def test_conv_matches_naive_loops(rng, f64):
    x, k = rng.normal(size=(2, 3, 5, 4)), rng.normal(size=(4, 3, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(k)).data
    np.testing.assert_allclose(out, naive_conv(x, k), atol=1e-6, rtol=0)


def test_conv_gradients(rng):
    x, k = rng.normal(size=(2, 2, 4, 4)), rng.normal(size=(3, 2, 3, 3))
    check_op(T.conv2d, x, k, tol=1e-4)


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_im2col_col2im_are_adjoint(rng, f64):
    x = rng.normal(size=(2, 3, 4, 5))
    cols = T.im2col(Tensor(x)).data
    y = rng.normal(size=cols.shape)
    back = T.col2im(Tensor(y), x.shape).data
    assert math.isclose(np.sum(cols * y), np.sum(x * back), rel_tol=1e-12)


# -- elementwise family ---------------------------------------------------------

def test_relu_values():
    assert T.relu(Tensor(-3.0)).item() == 0.0
    assert T.relu(Tensor(3.0)).item() == 3.0


def test_instance_norm_constant_plane_is_zero():
    out = T.instance_norm(Tensor(np.full((2, 3, 4, 4), 7.5)))
    assert np.all(out.data == 0.0)


def test_instance_norm_statistics(rng, f64):
    out = T.instance_norm(Tensor(rng.normal(3.0, 2.0, size=(2, 3, 4, 4)))).data
    np.testing.assert_allclose(out.mean(axis=(2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(2, 3)), 1.0, atol=1e-5)


def test_mean_gradient_is_one_over_n(f64):
    x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
    (g,) = T.grad(T.mean(x), [x])
    np.testing.assert_array_equal(g.data, np.full((3, 4), 1 / 12))


ELEMENTWISE = [
    ("add", lambda a, b: a + b, 2),
    ("sub", lambda a, b: a - b, 2),
    ("mul", lambda a, b: a * b, 2),
    ("div", lambda a, b: a / b, 2),
    ("scalar-mul", lambda a: a * 2.5, 1),
    ("neg", lambda a: -a, 1),
    ("square", T.square, 1),
    ("sqrt", T.sqrt, 1),
    ("exp", T.exp, 1),
    ("log", T.log, 1),
    ("relu", T.relu, 1),
]


@pytest.mark.parametrize("name,fn,arity", ELEMENTWISE, ids=[e[0] for e in ELEMENTWISE])
def test_elementwise_gradient_oracle(name, fn, arity, rng):
    # positive inputs away from the relu kink keep every op smooth
    arrays = [rng.uniform(0.5, 2.0, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4))
              if name in ("relu", "add", "sub", "mul", "neg", "square", "scalar-mul")
              else rng.uniform(0.5, 2.0, size=(3, 4)) for _ in range(arity)]
    check_op(fn, *arrays, tol=1e-6)


def test_broadcast_add_gradient(rng):
    check_op(lambda a, b: a + b, rng.normal(size=(3, 4)), rng.normal(size=(4,)), tol=1e-6)
    check_op(lambda a, b: a * b, rng.normal(size=(2, 3, 2, 2)), rng.normal(size=(1, 3, 1, 1)), tol=1e-6)


REDUCTIONS = [
    ("sum", lambda a: T.sum(a)),
    ("sum-axis", lambda a: T.sum(a, axis=1)),
    ("mean", lambda a: T.mean(a, axis=(2, 3), keepdims=True)),
    ("avg_pool2d", T.avg_pool2d),
    ("instance_norm", T.instance_norm),
    ("flatten", T.flatten),
    ("transpose", lambda a: a.transpose(0, 2, 3, 1)),
    ("getitem", lambda a: a[:, 1:, ::2]),
]


@pytest.mark.parametrize("name,fn", REDUCTIONS, ids=[r[0] for r in REDUCTIONS])
def test_reduction_gradient_oracle(name, fn, rng):
    check_op(fn, rng.normal(size=(2, 3, 4, 4)), tol=1e-4)


def test_concat_gradient(rng):
    check_op(lambda a, b: T.concat([a, b], axis=1), rng.normal(size=(2, 3)), rng.normal(size=(2, 2)), tol=1e-6)


# -- cross entropy ----------------------------------------------------------------

def test_cross_entropy_uniform_logits():
    loss = T.softmax_cross_entropy(Tensor(np.zeros((2, 4))), [1, 3])
    assert math.isclose(loss.item(), math.log(4), rel_tol=1e-6)


def test_cross_entropy_margin_limit(f64):
    losses = [T.softmax_cross_entropy(Tensor([[m, 0.0, 0.0]]), [0]).item() for m in (1.0, 10.0, 100.0, 1000.0)]
    assert all(a >= b for a, b in zip(losses, losses[1:])) and losses[0] > losses[1]
    assert losses[-1] < 1e-12


def test_cross_entropy_gradient(rng):
    labels = np.array([0, 2, 1, 1, 0])
    check_op(lambda z: T.softmax_cross_entropy(z, labels), rng.normal(size=(5, 3)), tol=1e-4)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(InputError):
        T.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_cross_entropy_second_order(rng, f64):
    """Hessian-vector product through the stabilized softmax matches differences of gradients."""
    labels = np.array([0, 2, 1])
    z0, v = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))

    def grad_at(z):
        zt = Tensor(z, requires_grad=True)
        return T.grad(T.softmax_cross_entropy(zt, labels), [zt])[0].data

    zt = Tensor(z0, requires_grad=True)
    (g,) = T.grad(T.softmax_cross_entropy(zt, labels), [zt], create_graph=True)
    (hv,) = T.grad(T.sum(g * Tensor(v)), [zt])
    fd = (grad_at(z0 + 1e-5 * v) - grad_at(z0 - 1e-5 * v)) / 2e-5
    assert norm_rel(hv.data, fd) < 1e-6


# -- backward -------------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    grads = T.backward(T.sum(x))
    np.testing.assert_array_equal(grads[x].data, [1, 1, 1])


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    np.testing.assert_array_equal(T.backward(T.sum(x * x))[x].data, [2, 4])


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(x * 2.0)


def test_backward_replay_is_bit_identical(rng):
    x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    loss = T.softmax_cross_entropy(T.relu(x @ w), [0, 1, 1, 0])
    first, second = T.backward(loss), T.backward(loss)
    for leaf in (x, w):
        assert first[leaf].data.tobytes() == second[leaf].data.tobytes()


def test_detach_blocks_gradient():
    x = Tensor([1.0, -2.0], requires_grad=True)
    y = x * 3.0
    loss = T.sum(y.detach() * y.detach()) + T.sum(x)
    np.testing.assert_array_equal(T.backward(loss, [x])[x].data, [1.0, 1.0])
    far = T.sum(T.square(x.detach()))
    assert not far.requires_grad
    np.testing.assert_array_equal(T.grad(far, [x])[0].data, [0.0, 0.0])


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_grad_wrt_interior_node(f64):
    """Differentiating w.r.t. an intermediate node ignores paths behind it."""
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    z = y * 3.0 + x
    (gy,) = T.grad(T.sum(z), [y])
    assert gy.item() == 3.0


def test_unrolled_sgd_hypergradient(f64):
    """Two SGD steps on 0.5*(w*a - 1)^2; d(final loss)/da vs finite differences."""
    def final(a_val, create_graph=True):
        a = Tensor(a_val, requires_grad=True)
        w = Tensor(0.3, requires_grad=True)
        for _ in range(2):
            inner = T.square(w * a - 1.0) * 0.5
            (g,) = T.grad(inner, [w], create_graph=create_graph)
            w = w - g * 0.4
        return a, T.square(w - 2.0)

    a, loss = final(1.7)
    analytic = T.backward(loss, [a])[a].item()
    fd = (final(1.7 + 1e-6)[1].item() - final(1.7 - 1e-6)[1].item()) / 2e-6
    assert abs(analytic - fd) / abs(fd) < 1e-6


def test_deep_graph_does_not_recurse():
    x = Tensor(1.0, requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0
    assert T.backward(y, [x])[x].item() == 1.0


def test_default_dtype_float32_and_switch():
    assert Tensor([1.0]).dtype == np.float32
    with T.default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert (Tensor([1.0]) * 2.0).dtype == np.float32


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=3), st.integers(0, 2 ** 31 - 1))
def test_sum_to_broadcast_adjoint(shape, seed):
    rng = np.random.default_rng(seed)
    small = tuple(s if rng.random() < 0.5 else 1 for s in shape)
    big_shape = (2,) + tuple(shape)
    x = rng.normal(size=small)
    y = rng.normal(size=big_shape)
    with T.default_dtype(np.float64):
        lhs = np.sum(T.broadcast_to(Tensor(x), big_shape).data * y)
        rhs = np.sum(x * T.sum_to(Tensor(y), small).data)
    assert math.isclose(lhs, rhs, rel_tol=1e-10, abs_tol=1e-10)
