"""Selective state-space scanning: S6 recurrence, SS2D and the VSS layer.

Sequences are B×L×D.  The continuous system h' = A h + B x is discretised
with zero-order hold for A (``a_bar = exp(delta * A)``) and an Euler step
for B (``b_bar = delta * B``); delta, B and C are computed from the input
so the recurrence is input-selective.
"""
from __future__ import annotations

import math

import numpy as np

from . import functional as F
from . import init
from .tensor import Node, as_node, concat, exp, make_node, neg

SCAN_MODES = ("naive", "blocked")
DIRECTIONS = ("row_fwd", "col_fwd", "row_rev", "col_rev")
DEFAULT_CHUNK = 16


def dt_rank_for(d: int) -> int:
    return max(1, math.ceil(d / 16))


def discretize(delta, a_log, b_in):
    """Return ``(a_bar, b_bar)`` of shape B×L×D×N.

    ``delta`` is B×L×D (strictly positive), ``a_log`` D×N, ``b_in`` B×L×N.
    """
    delta = np.asarray(delta)
    if np.any(delta <= 0):
        raise ValueError("discretize: delta must be strictly positive")
    A = -np.exp(np.asarray(a_log))
    a_bar = np.exp(delta[..., None] * A)
    b_bar = delta[..., None] * np.asarray(b_in)[:, :, None, :]
    return a_bar, b_bar


def _states_naive(log_a, u):
    """h_t = exp(log_a_t) * h_{t-1} + u_t with h_0 = 0, one step at a time."""
    a_bar = np.exp(log_a)
    states = np.empty_like(u)
    h = np.zeros_like(u[:, 0])
    for t in range(u.shape[1]):
        h = a_bar[:, t] * h + u[:, t]
        states[:, t] = h
    return states


def _states_blocked(log_a, u, chunk=DEFAULT_CHUNK):
    """Same recurrence evaluated chunk-wise.

    Inside a chunk the state is a decay-weighted sum of inputs,
    h_t = sum_{s<=t} exp(S_t - S_s) u_s + exp(S_t) h_in, with S the running
    sum of ``log_a``; only the chunk boundary state is carried serially.
    """
    b, length = u.shape[:2]
    states = np.empty_like(u)
    h = np.zeros_like(u[:, 0])
    for start in range(0, length, chunk):
        stop = min(start + chunk, length)
        t = stop - start
        cum = np.cumsum(log_a[:, start:stop], axis=1)
        diff = cum[:, :, None] - cum[:, None, :]
        causal = np.tril(np.ones((t, t), dtype=bool))[None, :, :, None, None]
        decay = np.exp(np.where(causal, diff, -np.inf))
        block = (decay * u[:, None, start:stop]).sum(axis=2)
        block += np.exp(cum) * h[:, None]
        states[:, start:stop] = block
        h = block[:, -1]
    return states


def scan_states(x, delta, A, B, mode="blocked", chunk=DEFAULT_CHUNK):
    """Hidden states B×L×D×N of the discretised recurrence (no output map)."""
    log_a = delta[..., None] * A
    u = (delta * x)[..., None] * B[:, :, None, :]
    if mode == "naive":
        return _states_naive(log_a, u)
    if mode == "blocked":
        return _states_blocked(log_a, u, chunk)
    raise ValueError(f"unknown scan mode {mode!r}; expected one of {SCAN_MODES}")


def selective_scan_core(x, delta, A, B, C, D, mode="blocked") -> Node:
    """y_t = C_t · h_t + D ⊙ x_t for the recurrence driven by (delta, A, B).

    Shapes: x, delta B×L×D; A D×N; B, C B×L×N; D length D.
    """
    x, delta, A, B, C, D = (as_node(v) for v in (x, delta, A, B, C, D))
    if x.ndim != 3 or x.shape[1] < 1:
        raise ValueError(f"selective scan needs a non-empty B×L×D sequence, got {x.shape}")
    xv, dv, Av, Bv, Cv, Dv = x.value, delta.value, A.value, B.value, C.value, D.value
    H = scan_states(xv, dv, Av, Bv, mode)
    y = np.einsum("bldn,bln->bld", H, Cv) + xv * Dv

    def bw(gy):
        a_bar = np.exp(dv[..., None] * Av)
        gH = gy[..., None] * Cv[:, :, None, :]
        dh = np.empty_like(H)
        carry = np.zeros_like(H[:, 0])
        for t in range(H.shape[1] - 1, -1, -1):
            carry = gH[:, t] + carry
            dh[:, t] = carry
            carry = carry * a_bar[:, t]
        h_prev = np.concatenate([np.zeros_like(H[:, :1]), H[:, :-1]], axis=1)
        g_log_a = dh * h_prev * a_bar
        xB = xv[..., None] * Bv[:, :, None, :]
        g_delta = (g_log_a * Av).sum(-1) + (dh * xB).sum(-1)
        g_A = np.einsum("bldn,bld->dn", g_log_a, dv)
        g_x = (dh * Bv[:, :, None, :]).sum(-1) * dv + gy * Dv
        g_B = np.einsum("bldn,bld->bln", dh, dv * xv)
        g_C = np.einsum("bld,bldn->bln", gy, H)
        g_D = (gy * xv).sum(axis=(0, 1))
        return g_x, g_delta, g_A, g_B, g_C, g_D

    return make_node(y, (x, delta, A, B, C, D), bw, "selective_scan")


def init_s6(rng, d, n, dtype, dt_rank=None, dt_min=1e-3, dt_max=1e-1) -> dict:
    """S4D-real A, softplus-inverse dt bias in [dt_min, dt_max], unit skip."""
    r = dt_rank or dt_rank_for(d)
    a_log = np.log(np.tile(np.arange(1, n + 1, dtype=np.float64), (d, 1)))
    dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=d))
    dt_bias = dt + np.log(-np.expm1(-dt))
    return {
        "a_log": init.param(a_log, dtype),
        "d_skip": init.ones((d,), dtype),
        "in_proj": init.uniform(rng, (r + 2 * n, d), d, dtype),
        "dt_proj": {
            "weight": init.param(rng.uniform(-r ** -0.5, r ** -0.5, size=(d, r)), dtype),
            "bias": init.param(dt_bias, dtype),
        },
    }


def selective_scan(x, params, mode="blocked") -> Node:
    """Input-selective S6 scan over a B×L×D sequence."""
    x = as_node(x)
    if x.ndim != 3 or x.shape[1] < 1:
        raise ValueError(f"selective scan needs a non-empty B×L×D sequence, got {x.shape}")
    n = params["a_log"].shape[1]
    r = params["dt_proj"]["weight"].shape[1]
    proj = F.linear(x, params["in_proj"])
    dt_raw = proj[..., :r]
    b_in = proj[..., r:r + n]
    c_in = proj[..., r + n:]
    delta = F.softplus(F.linear(dt_raw, params["dt_proj"]["weight"], params["dt_proj"]["bias"]))
    A = neg(exp(params["a_log"]))
    return selective_scan_core(x, delta, A, b_in, c_in, params["d_skip"], mode)


# -- four-direction cross scan -----------------------------------------------

def scan_orders(h: int, w: int) -> np.ndarray:
    """4×(H·W) gather indices into the row-major flattening."""
    row = np.arange(h * w)
    col = row.reshape(h, w).T.reshape(-1)
    return np.stack([row, col, row[::-1], col[::-1]])


def cross_scan(x) -> Node:
    """B×C×H×W map -> B×4×C×(H·W) directional sequences."""
    x = as_node(x)
    b, c, h, w = x.shape
    orders = scan_orders(h, w)
    flat = x.value.reshape(b, c, h * w)
    out = np.stack([flat[:, :, o] for o in orders], axis=1)

    def bw(g):
        return (_merge(g, orders).reshape(b, c, h, w),)

    return make_node(out, (x,), bw, "cross_scan")


def _merge(seqs, orders):
    b, _, c, length = seqs.shape
    out = np.zeros((b, c, length), dtype=seqs.dtype)
    for d in range(4):
        restored = np.empty((b, c, length), dtype=seqs.dtype)
        restored[:, :, orders[d]] = seqs[:, d]
        out = out + restored
    return out


def cross_merge(seqs, h: int, w: int) -> Node:
    """Undo each direction's ordering and sum the four maps (direction 0 to 3)."""
    seqs = as_node(seqs)
    b, ndir, c, length = seqs.shape
    if ndir != 4:
        raise ValueError(f"cross_merge expects 4 directions, got {ndir}")
    if length != h * w:
        raise ValueError(f"sequence length {length} does not match {h}x{w} map")
    orders = scan_orders(h, w)
    out = _merge(seqs.value, orders).reshape(b, c, h, w)

    def bw(g):
        flat = g.reshape(b, c, length)
        return (np.stack([flat[:, :, o] for o in orders], axis=1),)

    return make_node(out, (seqs,), bw, "cross_merge")


def init_ss2d(rng, d, n, dtype, shared=False) -> dict:
    if shared:
        s6 = init_s6(rng, d, n, dtype)
        directions = [s6] * 4
    else:
        directions = [init_s6(rng, d, n, dtype) for _ in range(4)]
    return {"directions": directions, "norm": init.norm(d, dtype)}


def ss2d(x, params, mode="blocked") -> Node:
    """B×H×W×C -> B×H×W×C: cross-scan, per-direction S6, cross-merge, LN."""
    x = as_node(x)
    b, h, w, c = x.shape
    seqs = cross_scan(F.to_channels_first(x))
    outs = []
    for d in range(4):
        seq = seqs[:, d].transpose((0, 2, 1))
        y = selective_scan(seq, params["directions"][d], mode)
        outs.append(y.transpose((0, 2, 1)).reshape(b, 1, c, h * w))
    merged = cross_merge(concat(outs, axis=1), h, w)
    return F.layer_norm(F.to_channels_last(merged), params["norm"]["gamma"], params["norm"]["beta"])


# -- VSS layer / block --------------------------------------------------------

def init_vss_layer(rng, c, n, dtype, shared=False) -> dict:
    inner = 2 * c
    return {
        "norm_in": init.norm(c, dtype),
        "expand": init.dense(rng, 4 * c, c, dtype),
        "dwconv": init.conv(rng, inner, 1, 3, dtype),
        "ss2d": init_ss2d(rng, inner, n, dtype, shared),
        "norm_out": init.norm(inner, dtype),
        "out_proj": init.dense(rng, c, inner, dtype),
    }


def vss_layer(x, params, mode="blocked") -> Node:
    x = as_node(x)
    c = x.shape[-1]
    xn = F.layer_norm(x, params["norm_in"]["gamma"], params["norm_in"]["beta"])
    expanded = F.linear(xn, params["expand"]["weight"], params["expand"]["bias"])
    if expanded.shape[-1] % 2:
        raise ValueError("VSS expansion width must be even to split into two halves")
    half = expanded.shape[-1] // 2
    branch, gate = expanded[..., :half], expanded[..., half:]
    branch = F.silu(F.depthwise_conv_tokens(branch, params["dwconv"]["weight"], params["dwconv"]["bias"]))
    branch = ss2d(branch, params["ss2d"], mode)
    branch = F.layer_norm(branch, params["norm_out"]["gamma"], params["norm_out"]["beta"])
    mixed = branch * F.silu(gate)
    out = F.linear(mixed, params["out_proj"]["weight"], params["out_proj"]["bias"])
    if out.shape[-1] != c:
        raise ValueError(f"VSS output width {out.shape[-1]} != input width {c}")
    return x + out


def init_vss_block(rng, c, n, dtype, shared=False, depth=4) -> list:
    return [init_vss_layer(rng, c, n, dtype, shared) for _ in range(depth)]


def vss_block(x, layers, mode="blocked") -> Node:
    if len(layers) != 4:
        raise ValueError(f"a VSS block has exactly 4 layers, got {len(layers)}")
    if len({id(layer) for layer in layers}) != 4:
        raise ValueError("VSS block layers must be distinct parameter sets")
    for layer in layers:
        x = vss_layer(x, layer, mode)
    return x
