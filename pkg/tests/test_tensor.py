import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medvkan import functional as F
from medvkan import tensor as T
from medvkan.tensor import Node, backward, concat, finite_diff_check, no_grad, split


def _node(v):
    return Node(np.asarray(v, dtype=np.float64), requires_grad=True)


class TestConv:
    def test_identity_kernel(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        out = F.conv2d(x, np.ones((1, 1, 1, 1)))
        np.testing.assert_array_equal(out.value, x)

    def test_all_ones_sums_window(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        assert F.conv2d(x, np.ones((1, 1, 2, 2))).value.tolist() == [[[[10.0]]]]

    def test_same_padding_shape(self):
        x = np.zeros((1, 3, 32, 32), dtype=np.float32)
        assert F.conv2d(x, np.zeros((48, 3, 3, 3), dtype=np.float32), padding=1).shape == (1, 48, 32, 32)

    def test_no_kernel_flip(self):
        x = np.zeros((1, 1, 3, 3))
        x[0, 0, 1, 1] = 1.0
        w = np.arange(9.0).reshape(1, 1, 3, 3)
        # cross-correlation of an impulse reproduces the kernel rotated by 180 degrees
        np.testing.assert_array_equal(F.conv2d(x, w, padding=1).value[0, 0], w[0, 0, ::-1, ::-1])

    def test_bad_channels_raise(self):
        with pytest.raises(ValueError):
            F.conv2d(np.zeros((1, 3, 4, 4)), np.zeros((2, 2, 3, 3)))

    def test_groups_must_divide(self):
        with pytest.raises(ValueError):
            F.conv2d(np.zeros((1, 3, 4, 4)), np.zeros((3, 1, 3, 3)), groups=2)

    def test_transpose_single_site(self):
        out = F.conv_transpose2d(np.array([[[[5.0]]]]), np.ones((1, 1, 2, 2)), stride=2)
        np.testing.assert_array_equal(out.value, np.full((1, 1, 2, 2), 5.0))

    def test_transpose_shape(self):
        out = F.conv_transpose2d(np.zeros((1, 4, 16, 16)), np.zeros((4, 6, 2, 2)), stride=2)
        assert out.shape == (1, 6, 32, 32)

    @pytest.mark.parametrize("stride,k,groups", [(1, 3, 1), (2, 2, 1), (2, 3, 1), (1, 3, 4), (1, 3, 2)])
    def test_adjoint_identity(self, stride, k, groups):
        rng = np.random.default_rng(stride * 10 + k + groups)
        x = rng.normal(size=(2, 4, 8, 8))
        w = rng.normal(size=(4, 4 // groups, k, k))
        y = F.conv2d(x, w, stride=stride, groups=groups).value
        g = rng.normal(size=y.shape)
        # adjoint through backward of conv2d
        xn = _node(x)
        backward((F.conv2d(xn, w, stride=stride, groups=groups) * g).sum())
        assert abs(np.vdot(y, g) - np.vdot(x, xn.grad)) < 1e-10

    def test_transposed_conv_is_adjoint(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 8, 8))
        w = rng.normal(size=(5, 3, 2, 2))  # conv weight out=5, in=3
        y = rng.normal(size=(2, 5, 4, 4))
        lhs = np.vdot(F.conv2d(x, w, stride=2).value, y)
        rhs = np.vdot(x, F.conv_transpose2d(y, w, stride=2).value)
        assert abs(lhs - rhs) < 1e-10


class TestPoolLinearNorm:
    def test_pool_examples(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        assert F.pool2d(x, "max", 2).value.item() == 4.0
        assert F.pool2d(x, "avg", "global").value.item() == 2.5

    def test_pool_halves(self):
        assert F.pool2d(np.zeros((1, 5, 16, 16)), "max", 2).shape == (1, 5, 8, 8)

    def test_linear_examples(self):
        out = F.linear(np.array([1.0, 2.0]), np.array([[1.0, 1.0], [1.0, -1.0]]), np.zeros(2))
        assert out.value.tolist() == [3.0, -1.0]
        x = np.random.default_rng(0).normal(size=(3, 4))
        np.testing.assert_array_equal(F.linear(x, np.eye(4), np.zeros(4)).value, x)

    def test_batch_norm_examples(self):
        x = np.ones((2, 3, 4, 4)) * np.arange(3.0)[None, :, None, None]
        rm, rv = np.zeros(3), np.ones(3)
        out = F.batch_norm2d(x, np.ones(3), np.zeros(3), rm, rv, training=True)
        np.testing.assert_array_equal(out.value, 0.0)
        out = F.batch_norm2d(x, np.zeros(3), np.full(3, 7.0), rm, rv, training=True)
        np.testing.assert_array_equal(out.value, 7.0)

    def test_batch_norm_statistics(self):
        x = np.random.default_rng(1).normal(3.0, 2.0, size=(4, 3, 5, 5))
        out = F.batch_norm2d(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), training=True).value
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-5)

    def test_batch_norm_running_stats_and_eval(self):
        rng = np.random.default_rng(2)
        x = rng.normal(1.0, 2.0, size=(4, 2, 3, 3))
        rm, rv = np.zeros(2), np.ones(2)
        F.batch_norm2d(x, np.ones(2), np.zeros(2), rm, rv, training=True)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))
        a = F.batch_norm2d(x, np.ones(2), np.zeros(2), rm, rv, training=False).value
        b = F.batch_norm2d(x, np.ones(2), np.zeros(2), rm, rv, training=False).value
        np.testing.assert_array_equal(a, b)

    def test_layer_norm_examples(self):
        assert np.all(F.layer_norm(np.full(4, 3.0), np.ones(4), np.zeros(4)).value == 0.0)
        np.testing.assert_allclose(F.layer_norm(np.array([1.0, -1.0]), np.ones(2), np.zeros(2)).value,
                                   [1.0, -1.0], atol=1e-5)
        x = np.random.default_rng(0).normal(size=(3, 5))
        np.testing.assert_array_equal(F.layer_norm(x, np.zeros(5), np.arange(5.0)).value,
                                      np.broadcast_to(np.arange(5.0), (3, 5)))


class TestActivations:
    def test_values(self):
        assert F.relu(np.array([-2.0, 3.0])).value.tolist() == [0.0, 3.0]
        assert F.silu(np.array(0.0)).value == 0.0
        assert abs(F.silu(np.array(1.0)).value - 0.7310585786300049) < 1e-12
        assert abs(F.softplus(np.array(0.0)).value - np.log(2)) < 1e-12
        with pytest.raises(ValueError):
            F.activation(np.zeros(2), "gelu")

    def test_softmax(self):
        assert F.softmax(np.array([0.0, 0.0])).value.tolist() == [0.5, 0.5]
        np.testing.assert_array_equal(F.softmax(np.array([1000.0, 0.0])).value, [1.0, 0.0])
        np.testing.assert_allclose(F.softmax(np.array([1.0, 2.0, 3.0])).value, [0.09003, 0.24473, 0.66524],
                                   atol=1e-5)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
    def test_softmax_is_distribution(self, vals):
        p = F.softmax(np.array(vals)).value
        assert np.all(p >= 0)
        assert abs(p.sum() - 1.0) < 1e-12


class TestBackward:
    def test_square(self):
        x = _node(3.0)
        backward(x * x)
        assert x.grad == 6.0

    def test_silu_at_zero(self):
        x = _node(0.0)
        backward(F.silu(x))
        assert abs(x.grad - 0.5) < 1e-15

    def test_shared_subexpression_accumulates(self):
        g = _node(1.5)
        backward(g + g)
        assert g.grad == 2.0

    def test_requires_scalar_root(self):
        with pytest.raises(ValueError):
            backward(_node([1.0, 2.0]) * 2.0)

    def test_ids_topological(self):
        a = _node(1.0)
        b = a * 2.0
        c = b + a
        assert a.id < b.id < c.id

    def test_graph_freed_after_backward(self):
        a = _node(2.0)
        out = (a * a).sum()
        backward(out)
        assert out.parents == ()

    def test_no_grad_records_nothing(self):
        a = _node(2.0)
        with no_grad():
            out = a * a
        assert out.parents == () and not out.requires_grad

    def test_concat_split_roundtrip(self):
        a = _node(np.arange(6.0).reshape(2, 3))
        parts = split(a, 3, axis=1)
        whole = concat(parts, axis=1)
        np.testing.assert_array_equal(whole.value, a.value)
        backward((whole * whole).sum())
        np.testing.assert_array_equal(a.grad, 2 * a.value)


class TestFiniteDiff:
    def test_linear(self):
        rng = np.random.default_rng(0)
        err = finite_diff_check(lambda x, w: F.linear(x, w).sum(), [rng.normal(size=(3, 4)), rng.normal(size=(2, 4))])
        assert err <= 1e-7

    def test_conv(self):
        rng = np.random.default_rng(1)
        err = finite_diff_check(lambda x, w: (F.conv2d(x, w, padding=1) ** 2).sum(),
                                [rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3))])
        assert err <= 1e-6

    def test_relu_away_from_kink(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(0.1, 1.0, size=20) * rng.choice([-1, 1], size=20)
        assert finite_diff_check(lambda v: (F.relu(v) * np.arange(20.0)).sum(), [x]) <= 1e-7

    @pytest.mark.parametrize("op", ["exp", "log", "sqrt", "div", "pow", "amax", "getitem", "where", "matmul"])
    def test_primitives(self, op):
        rng = np.random.default_rng(3)
        x = rng.uniform(0.5, 2.0, size=(3, 4))
        y = rng.uniform(0.5, 2.0, size=(3, 4))
        fns = {
            "exp": lambda a, b: T.exp(a).sum(),
            "log": lambda a, b: T.log(a).sum(),
            "sqrt": lambda a, b: T.sqrt(a).sum(),
            "div": lambda a, b: (a / b).sum(),
            "pow": lambda a, b: (a ** 3).sum(),
            "amax": lambda a, b: T.amax(a, axis=1).sum(),
            "getitem": lambda a, b: (a[np.array([0, 2, 2])] * b[:3]).sum(),
            "where": lambda a, b: T.where(a.value > 1.0, a, b * 2).sum(),
            "matmul": lambda a, b: (a @ b.transpose()).sum(),
        }
        assert finite_diff_check(fns[op], [x, y]) <= 1e-6
