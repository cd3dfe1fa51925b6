import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medvkan import init
from medvkan.init import make_rng
from medvkan.kan import (SplineGrid, bspline_basis, efc_kan, efconv, init_efc_kan, init_efconv, init_kan_linear,
                         init_tok_kan, init_vkan_block, kan_linear, tok_kan, vkan_block)
from medvkan import functional as F

F64 = np.float64


def _zero(tree):
    for leaf in init.trainable(tree).values():
        leaf.value = np.zeros_like(leaf.value)


class TestGrid:
    def test_knots(self):
        g = SplineGrid(k=3, G=5)
        t = g.knots
        assert len(t) == 5 + 2 * 3 + 1 and g.n_basis == 8
        assert np.all(np.diff(t) > 0)
        assert t[3] == -1.0 and abs(t[8] - 1.0) < 1e-15

    def test_from_knots_roundtrip(self):
        g = SplineGrid(k=2, G=4, lo=-2.0, hi=3.0)
        assert SplineGrid.from_knots(g.knots, g.n_basis) == g

    def test_invalid(self):
        with pytest.raises(ValueError):
            SplineGrid(k=3, G=0)
        with pytest.raises(ValueError):
            SplineGrid(lo=1.0, hi=1.0)


class TestBasis:
    def test_order_zero_indicator(self):
        g = SplineGrid(k=0, G=4)
        t = g.knots
        for i in range(4):
            x = (t[i] + t[i + 1]) / 2
            np.testing.assert_array_equal(bspline_basis(np.array([x]), g)[0], np.eye(4)[i])
        np.testing.assert_array_equal(bspline_basis(np.array([t[-1]]), g)[0], np.eye(4)[-1])

    def test_hat_midpoint(self):
        g = SplineGrid(k=1, G=4)
        t = g.knots
        x = (t[2] + t[3]) / 2
        b = bspline_basis(np.array([x]), g)[0]
        assert sorted(b[b > 0].tolist()) == [0.5, 0.5]

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_partition_of_unity(self, k):
        g = SplineGrid(k=k, G=5)
        x = np.linspace(g.knots[k], g.knots[g.G + k], 1000)
        assert np.max(np.abs(bspline_basis(x, g).sum(-1) - 1.0)) <= 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 3), st.integers(1, 8), st.floats(-3, 3))
    def test_local_support(self, k, G, x):
        g = SplineGrid(k=k, G=G)
        t = g.knots
        b = bspline_basis(np.array([x]), g)[0]
        for i in range(g.n_basis):
            if x < t[i] or x > t[i + k + 1]:
                assert b[i] == 0.0

    def test_outside_extended_grid_is_zero(self):
        g = SplineGrid(k=3, G=5)
        assert np.all(bspline_basis(np.array([-5.0, 5.0]), g) == 0.0)


class TestKANLinear:
    def test_zero_spline_is_base_path(self):
        rng = make_rng(0)
        p = init_kan_linear(rng, 3, 2, SplineGrid(), F64)
        p["spline_weight"].value[:] = 0.0
        x = rng.normal(size=(5, 3))
        np.testing.assert_allclose(kan_linear(x, p).value, F.silu(x).value @ p["base_weight"].value.T, rtol=1e-14)

    def test_single_coefficient(self):
        g = SplineGrid(k=0, G=4)
        p = init_kan_linear(make_rng(0), 1, 1, g, F64)
        p["base_weight"].value[:] = 0.0
        p["spline_weight"].value[:] = 0.0
        p["spline_weight"].value[0, 0, 2] = 1.7
        x = np.array([[0.1], [0.4]])  # both inside cell 2 = [0, 0.5)
        np.testing.assert_array_equal(kan_linear(x, p).value, [[1.7], [1.7]])

    def test_linear_in_weights(self):
        rng = make_rng(1)
        p = init_kan_linear(rng, 4, 3, SplineGrid(), F64)
        x = rng.uniform(-1, 1, size=(6, 4))
        y1 = kan_linear(x, p).value
        p["base_weight"].value *= 2
        p["spline_weight"].value *= 2
        np.testing.assert_array_equal(kan_linear(x, p).value, 2 * y1)

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            kan_linear(np.zeros((2, 5)), init_kan_linear(make_rng(0), 4, 3, SplineGrid(), F64))


class TestTokAndEFC:
    def test_tok_kan_shape_and_zero(self):
        rng = make_rng(2)
        p = init_tok_kan(rng, 16, SplineGrid(), F64)
        x = rng.normal(size=(2, 8, 8, 16))
        assert tok_kan(x, p).shape == x.shape
        _zero(p)
        np.testing.assert_array_equal(tok_kan(x, p).value, 0.0)

    def test_efconv_none_identity(self):
        x = np.random.default_rng(0).normal(size=(1, 4, 4, 3))
        np.testing.assert_array_equal(efconv(x, "none", []).value, x)

    def test_efconv_identity_kernels(self):
        convs = init_efconv(make_rng(0), 3, "conv3x2", F64)
        for c in convs:
            c["weight"].value[:] = 0.0
            c["weight"].value[np.arange(3), np.arange(3), 1, 1] = 1.0
            c["bias"].value[:] = 0.0
        x = np.random.default_rng(0).normal(size=(1, 5, 5, 3))
        np.testing.assert_array_equal(efconv(x, "conv3x2", convs).value, x)

    @staticmethod
    def _impulse_support(mode):
        convs = init_efconv(make_rng(0), 1, mode, F64)
        for c in convs:
            c["weight"].value[:] = 1.0
            c["bias"].value[:] = 0.0
        x = np.zeros((1, 9, 9, 1))
        x[0, 4, 4, 0] = 1.0
        return efconv(x, mode, convs).value[0, :, :, 0] != 0

    def test_receptive_field(self):
        s5, s33 = self._impulse_support("conv5"), self._impulse_support("conv3x2")
        np.testing.assert_array_equal(s5, s33)
        assert s5.sum() == 25 and s5[2:7, 2:7].all()
        assert self._impulse_support("conv3").sum() == 9

    def test_efconv_mode_errors(self):
        with pytest.raises(ValueError):
            init_efconv(make_rng(0), 2, "conv7", F64)
        with pytest.raises(ValueError):
            efconv(np.zeros((1, 2, 2, 2)), "conv3x2", [])

    def test_efc_kan_residual(self):
        rng = make_rng(3)
        x = rng.normal(size=(1, 4, 4, 4))
        p = init_efc_kan(rng, 4, SplineGrid(), "conv3", F64)
        _zero(p["tok"])
        np.testing.assert_array_equal(efc_kan(x, p, "conv3").value, efconv(x, "conv3", p["efconv"]).value)
        p = init_efc_kan(rng, 4, SplineGrid(), "none", F64)
        _zero(p["tok"])
        np.testing.assert_array_equal(efc_kan(x, p, "none").value, x)


class TestVKAN:
    def test_zero_weights_give_layer_norm(self):
        rng = make_rng(4)
        p = init_vkan_block(rng, 4, 4, SplineGrid(), "conv3x2", F64)
        norm = p["norm"]
        for name, leaf in init.trainable(p).items():
            if not name.startswith("norm."):
                leaf.value = np.zeros_like(leaf.value)
        x = rng.normal(size=(1, 4, 4, 4))
        out = vkan_block(x, p, "conv3x2").value
        # the VSS layers keep their own residuals, so the block sees x + x
        np.testing.assert_array_equal(out, F.layer_norm(2 * x, norm["gamma"], norm["beta"]).value)
        np.testing.assert_allclose(out, F.layer_norm(x, norm["gamma"], norm["beta"]).value, rtol=1e-4)

    @pytest.mark.slow
    def test_paper_width_shape(self):
        p = init_vkan_block(make_rng(5), 768, 16, SplineGrid(), "conv3x2", np.float32)
        assert vkan_block(np.zeros((1, 8, 8, 768), dtype=np.float32), p, "conv3x2").shape == (1, 8, 8, 768)
