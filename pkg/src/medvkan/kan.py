"""B-spline Kolmogorov-Arnold layers and the VKAN block.

Each edge function of :func:`kan_linear` is ``w_b * silu(x) + sum_j c_j N_j(x)``
where ``N_j`` are order-k B-spline bases on a fixed uniform grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import functional as F
from . import init
from .scan import init_vss_block, vss_block
from .tensor import Node, as_node, make_node

EFCONV_MODES = ("none", "conv3", "conv5", "conv3x2")
_EFCONV_KERNELS = {"none": (), "conv3": (3,), "conv5": (5,), "conv3x2": (3, 3)}


@dataclass(frozen=True)
class SplineGrid:
    """Uniform knot vector covering ``[lo, hi]`` with ``k`` extra knots per side."""

    k: int = 3
    G: int = 5
    lo: float = -1.0
    hi: float = 1.0

    def __post_init__(self):
        if self.k < 0 or self.G < 1 or not self.hi > self.lo:
            raise ValueError(f"invalid spline grid k={self.k}, G={self.G}, range=[{self.lo}, {self.hi}]")

    @property
    def n_basis(self) -> int:
        return self.G + self.k

    @property
    def knots(self) -> np.ndarray:
        step = (self.hi - self.lo) / self.G
        return self.lo + step * np.arange(-self.k, self.G + self.k + 1, dtype=np.float64)

    @classmethod
    def from_knots(cls, knots, n_basis):
        knots = np.asarray(knots)
        k = len(knots) - n_basis - 1
        G = n_basis - k
        step = knots[1] - knots[0]
        return cls(k=k, G=G, lo=float(knots[k]), hi=float(knots[k] + G * step))


def _safe_div(num, den):
    den = np.broadcast_to(den, num.shape)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den != 0)
    return out


def _basis_levels(x, knots, k):
    """Return (order-k bases, order-(k-1) bases or None) for inputs ``x``."""
    t = np.asarray(knots, dtype=x.dtype if x.dtype.kind == "f" else np.float64)
    xe = x[..., None]
    bases = ((xe >= t[:-1]) & (xe < t[1:])).astype(t.dtype)
    # the last cell is closed on the right
    bases[..., -1] = np.where(x == t[-1], 1.0, bases[..., -1])
    prev = None
    for p in range(1, k + 1):
        prev = bases
        left = _safe_div(xe - t[:-(p + 1)], t[p:-1] - t[:-(p + 1)]) * bases[..., :-1]
        right = _safe_div(t[p + 1:] - xe, t[p + 1:] - t[1:-p]) * bases[..., 1:]
        bases = left + right
    return bases, prev


def bspline_basis(x, grid: SplineGrid) -> np.ndarray:
    """Cox-de Boor recursion; returns an array of shape ``x.shape + (G + k,)``."""
    x = np.asarray(x, dtype=np.float64) if np.asarray(x).dtype.kind != "f" else np.asarray(x)
    return _basis_levels(x, grid.knots, grid.k)[0]


def bspline_basis_node(x, knots, k) -> Node:
    """Differentiable version of :func:`bspline_basis` (gradient w.r.t. x)."""
    x = as_node(x)
    t = np.asarray(knots, dtype=x.dtype)
    bases, prev = _basis_levels(x.value, t, k)

    def bw(g):
        if k == 0:
            return (np.zeros_like(x.value),)
        d_left = _safe_div(np.full(t[k:-1].shape, float(k), dtype=t.dtype), t[k:-1] - t[:-(k + 1)])
        d_right = _safe_div(np.full(t[k + 1:].shape, float(k), dtype=t.dtype), t[k + 1:] - t[1:-k])
        deriv = d_left * prev[..., :-1] - d_right * prev[..., 1:]
        return ((g * deriv).sum(-1),)

    return make_node(bases, (x,), bw, "bspline_basis")


def init_kan_linear(rng, in_f, out_f, grid: SplineGrid, dtype) -> dict:
    return {
        "base_weight": init.uniform(rng, (out_f, in_f), in_f, dtype),
        "spline_weight": init.param(rng.normal(0.0, 0.1 / math.sqrt(in_f), size=(out_f, in_f, grid.n_basis)), dtype),
        "grid": init.buffer(grid.knots, dtype),
    }


def kan_linear(x, params) -> Node:
    """Apply a KANLinear layer over the last axis of ``x`` (…×IN -> …×OUT)."""
    x = as_node(x)
    base_w, spline_w = params["base_weight"], params["spline_weight"]
    out_f, in_f, n_basis = spline_w.shape
    if x.shape[-1] != in_f:
        raise ValueError(f"kan_linear: input has {x.shape[-1]} features, layer expects {in_f}")
    knots = params["grid"].value
    k = len(knots) - n_basis - 1
    base = F.linear(F.silu(x), base_w)
    bases = bspline_basis_node(x, knots, k)
    flat = bases.reshape(x.shape[:-1] + (in_f * n_basis,))
    spline = F.linear(flat, spline_w.reshape(out_f, in_f * n_basis))
    return base + spline


def init_tok_kan(rng, c, grid, dtype) -> dict:
    return {
        "norm": init.norm(c, dtype),
        "fc1": init_kan_linear(rng, c, c, grid, dtype),
        "dw1": init.conv(rng, c, 1, 3, dtype),
        "fc2": init_kan_linear(rng, c, c, grid, dtype),
        "dw2": init.conv(rng, c, 1, 3, dtype),
    }


def tok_kan(x, params) -> Node:
    """LN -> KANLinear -> DWConv -> KANLinear -> DWConv on a B×H×W×C map."""
    t = F.layer_norm(x, params["norm"]["gamma"], params["norm"]["beta"])
    t = kan_linear(t, params["fc1"])
    t = F.depthwise_conv_tokens(t, params["dw1"]["weight"], params["dw1"]["bias"])
    t = kan_linear(t, params["fc2"])
    return F.depthwise_conv_tokens(t, params["dw2"]["weight"], params["dw2"]["bias"])


def init_efconv(rng, c, mode, dtype) -> list:
    if mode not in EFCONV_MODES:
        raise ValueError(f"unknown efconv mode {mode!r}; expected one of {EFCONV_MODES}")
    return [init.conv(rng, c, c, k, dtype) for k in _EFCONV_KERNELS[mode]]


def efconv(x, mode, convs) -> Node:
    """Channel-preserving 'same' convolutions ahead of Tok-KAN, no activation between."""
    if mode not in EFCONV_MODES:
        raise ValueError(f"unknown efconv mode {mode!r}; expected one of {EFCONV_MODES}")
    kernels = _EFCONV_KERNELS[mode]
    if len(convs) != len(kernels):
        raise ValueError(f"efconv mode {mode!r} needs {len(kernels)} conv layers, got {len(convs)}")
    x = as_node(x)
    if not kernels:
        return x
    y = F.to_channels_first(x)
    for conv, k in zip(convs, kernels):
        if conv["weight"].shape[-1] != k:
            raise ValueError(f"efconv mode {mode!r} expects {k}x{k} kernels")
        y = F.conv2d(y, conv["weight"], conv.get("bias"), padding=k // 2)
    return F.to_channels_last(y)


def init_efc_kan(rng, c, grid, mode, dtype) -> dict:
    return {"efconv": init_efconv(rng, c, mode, dtype), "tok": init_tok_kan(rng, c, grid, dtype)}


def efc_kan(x, params, mode) -> Node:
    xb = efconv(x, mode, params["efconv"])
    return tok_kan(xb, params["tok"]) + xb


def init_vkan_block(rng, c, d_state, grid, mode, dtype, shared_scan=False) -> dict:
    return {
        "vss": init_vss_block(rng, c, d_state, dtype, shared_scan),
        "norm": init.norm(c, dtype),
        "efc": init_efc_kan(rng, c, grid, mode, dtype),
    }


def vkan_block(x, params, mode, scan_mode="blocked") -> Node:
    """y = LN(x + VSS(x)); out = y + EFC-KAN(y)."""
    x = as_node(x)
    y = F.layer_norm(x + vss_block(x, params["vss"], scan_mode), params["norm"]["gamma"], params["norm"]["beta"])
    return y + efc_kan(y, params["efc"], mode)
