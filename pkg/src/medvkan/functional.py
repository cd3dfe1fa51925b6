"""Differentiable neural-network primitives built on :mod:`medvkan.tensor`.

Image tensors are NCHW.  Convolutions are cross-correlations (no kernel
flip) and support ``groups`` with a fast path for depthwise kernels.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Node, as_node, make_node, matmul, add

BN_EPS = 1e-5
LN_EPS = 1e-5
BN_MOMENTUM = 0.1


# -- convolution kernels on raw arrays ---------------------------------------

def _out_size(size, k, stride):
    return (size - k) // stride + 1


def _windows(xp, kh, kw, stride):
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _is_depthwise(w, groups, in_ch):
    return groups == in_ch and w.shape[0] == groups and w.shape[1] == 1


def _conv_fwd(xp, w, stride, groups):
    n, c, hp, wp = xp.shape
    o, cg, kh, kw = w.shape
    oh, ow = _out_size(hp, kh, stride), _out_size(wp, kw, stride)
    if _is_depthwise(w, groups, c):
        out = np.zeros((n, c, oh, ow), dtype=np.result_type(xp, w))
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
                out += patch * w[:, 0, i, j][None, :, None, None]
        return out
    if groups == 1:
        win = _windows(xp, kh, kw, stride)
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    og = o // groups
    parts = [
        _conv_fwd(xp[:, g * cg:(g + 1) * cg], w[g * og:(g + 1) * og], stride, 1)
        for g in range(groups)
    ]
    return np.concatenate(parts, axis=1)


def _conv_bwd_input(g, w, stride, groups, xp_shape):
    """Adjoint of :func:`_conv_fwd` with respect to the padded input."""
    n, c, hp, wp = xp_shape
    o, cg, kh, kw = w.shape
    oh, ow = g.shape[2], g.shape[3]
    dx = np.zeros(xp_shape, dtype=np.result_type(g, w))
    if _is_depthwise(w, groups, c):
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += g * w[:, 0, i, j][None, :, None, None]
        return dx
    if groups == 1:
        cols = np.tensordot(g, w, axes=([1], [0]))  # n, oh, ow, c, kh, kw
        cols = cols.transpose(0, 3, 4, 5, 1, 2)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
        return dx
    og = o // groups
    for grp in range(groups):
        dx[:, grp * cg:(grp + 1) * cg] = _conv_bwd_input(
            g[:, grp * og:(grp + 1) * og], w[grp * og:(grp + 1) * og], stride, 1, (n, cg, hp, wp)
        )
    return dx


def _conv_bwd_weight(g, xp, stride, groups, w_shape):
    o, cg, kh, kw = w_shape
    n, c = xp.shape[:2]
    oh, ow = g.shape[2], g.shape[3]
    if groups == c and o == groups and cg == 1:
        dw = np.zeros(w_shape, dtype=np.result_type(g, xp))
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
                dw[:, 0, i, j] = (g * patch).sum(axis=(0, 2, 3))
        return dw
    if groups == 1:
        win = _windows(xp, kh, kw, stride)
        return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
    og = o // groups
    parts = [
        _conv_bwd_weight(g[:, grp * og:(grp + 1) * og], xp[:, grp * cg:(grp + 1) * cg], stride, 1, (og, cg, kh, kw))
        for grp in range(groups)
    ]
    return np.concatenate(parts, axis=0)


# -- differentiable ops -------------------------------------------------------

def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1) -> Node:
    """2-D cross-correlation over an NCHW batch."""
    x, weight = as_node(x), as_node(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if stride < 1 or padding < 0 or groups < 1:
        raise ValueError("conv2d needs stride >= 1, padding >= 0, groups >= 1")
    if c % groups or o % groups:
        raise ValueError(f"channels ({c} in, {o} out) not divisible by groups={groups}")
    if cg != c // groups:
        raise ValueError(f"weight expects {cg * groups} input channels, input has {c}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ValueError(f"padded input {hp}x{wp} smaller than kernel {kh}x{kw}")
    xp = np.pad(x.value, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.value
    out = _conv_fwd(xp, weight.value, stride, groups)
    parents = (x, weight)
    if bias is not None:
        bias = as_node(bias)
        if bias.shape != (o,):
            raise ValueError(f"bias shape {bias.shape} does not match {o} output channels")
        out = out + bias.value[None, :, None, None]
        parents = parents + (bias,)

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gx = _conv_bwd_input(g, weight.value, stride, groups, xp.shape)
            if padding:
                gx = gx[:, :, padding:padding + h, padding:padding + w]
        if weight.requires_grad:
            gw = _conv_bwd_weight(g, xp, stride, groups, weight.shape)
        grads = (gx, gw)
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 2, 3)),)
        return grads

    return make_node(out, parents, bw, "conv2d")


def conv_transpose2d(x, weight, bias=None, stride=1) -> Node:
    """Transposed convolution; ``weight`` is (in_ch, out_ch, KH, KW).

    Exactly the adjoint of :func:`conv2d` (no padding, groups=1) with the
    same weight tensor.
    """
    x, weight = as_node(x), as_node(weight)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n, c, h, w = x.shape
    ci, co, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"weight expects {ci} input channels, input has {c}")
    out_shape = (n, co, (h - 1) * stride + kh, (w - 1) * stride + kw)
    out = _conv_bwd_input(x.value, weight.value, stride, 1, out_shape)
    parents = (x, weight)
    if bias is not None:
        bias = as_node(bias)
        out = out + bias.value[None, :, None, None]
        parents = parents + (bias,)

    def bw(g):
        gx = _conv_fwd(g, weight.value, stride, 1) if x.requires_grad else None
        gw = _conv_bwd_weight(x.value, g, stride, 1, weight.shape) if weight.requires_grad else None
        grads = (gx, gw)
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 2, 3)),)
        return grads

    return make_node(out, parents, bw, "conv_transpose2d")


def _first_hot(flat):
    idx = flat.argmax(axis=-1)
    hot = np.zeros(flat.shape, dtype=bool)
    np.put_along_axis(hot, idx[..., None], True, axis=-1)
    return hot


def pool2d(x, kind="max", window=2) -> Node:
    """Non-overlapping max/avg pooling, or global pooling with ``window="global"``."""
    x = as_node(x)
    n, c, h, w = x.shape
    if window == "global":
        kh, kw = h, w
    else:
        kh = kw = int(window)
        if h % kh or w % kw:
            raise ValueError(f"spatial dims {h}x{w} not divisible by pooling window {kh}")
    if kind not in ("max", "avg"):
        raise ValueError(f"unknown pooling kind {kind!r}")
    oh, ow = h // kh, w // kw
    blocks = x.value.reshape(n, c, oh, kh, ow, kw).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, kh * kw)
    if kind == "avg":
        out = blocks.mean(axis=-1)

        def bw(g):
            full = np.broadcast_to((g / (kh * kw))[..., None], blocks.shape)
            return (full.reshape(n, c, oh, ow, kh, kw).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    else:
        out = blocks.max(axis=-1)

        def bw(g):
            full = np.where(_first_hot(blocks), g[..., None], 0).astype(g.dtype)
            return (full.reshape(n, c, oh, ow, kh, kw).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return make_node(out, (x,), bw, f"{kind}_pool")


def linear(x, weight, bias=None) -> Node:
    """Affine map over the last axis; ``weight`` is (OUT, IN)."""
    x, weight = as_node(x), as_node(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input has {x.shape[-1]} features, weight expects {weight.shape[1]}")
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1]) if x.ndim != 2 else x
    out = matmul(flat, weight.transpose())
    if bias is not None:
        out = add(out, bias)
    return out.reshape(lead + (weight.shape[0],)) if x.ndim != 2 else out


def batch_norm2d(x, gamma, beta, running_mean, running_var, training=True,
                 momentum=BN_MOMENTUM, eps=BN_EPS) -> Node:
    """Per-channel batch norm.  Running stats are ndarrays updated in place."""
    x, gamma, beta = as_node(x), as_node(gamma), as_node(beta)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm2d: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    xv = x.value
    if training:
        mu = xv.mean(axis=(0, 2, 3))
        var = xv.var(axis=(0, 2, 3))
        count = xv.size // c
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (count / max(count - 1, 1))
    else:
        mu, var = running_mean.astype(xv.dtype), running_var.astype(xv.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.value[None, :, None, None] + beta.value[None, :, None, None]

    def bw(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.value[None, :, None, None]
        if training:
            m = xv.size // c
            gx = (inv[None, :, None, None] / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = gxhat * inv[None, :, None, None]
        return gx, gg, gb

    return make_node(out.astype(xv.dtype, copy=False), (x, gamma, beta), bw, "batch_norm2d")


def layer_norm(x, gamma, beta, eps=LN_EPS) -> Node:
    x, gamma, beta = as_node(x), as_node(gamma), as_node(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"layer_norm: last dim {c} but gamma {gamma.shape}, beta {beta.shape}")
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    var = xv.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    out = xhat * gamma.value + beta.value

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead)
        gb = g.sum(axis=lead)
        gxhat = g * gamma.value
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return make_node(out, (x, gamma, beta), bw, "layer_norm")


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def relu(x) -> Node:
    x = as_node(x)
    mask = x.value > 0
    return make_node(np.where(mask, x.value, 0).astype(x.dtype), (x,),
                     lambda g: (np.where(mask, g, 0).astype(g.dtype),), "relu")


def sigmoid(x) -> Node:
    x = as_node(x)
    s = _sigmoid(x.value)
    return make_node(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def silu(x) -> Node:
    x = as_node(x)
    s = _sigmoid(x.value)
    out = x.value * s
    return make_node(out, (x,), lambda g: (g * s * (1 + x.value * (1 - s)),), "silu")


def softplus(x) -> Node:
    """ln(1 + e^x), computed as max(x, 0) + log1p(e^-|x|)."""
    x = as_node(x)
    v = x.value
    out = np.maximum(v, 0) + np.log1p(np.exp(-np.abs(v)))
    return make_node(out, (x,), lambda g: (g * _sigmoid(v),), "softplus")


_ACTIVATIONS = {"relu": relu, "silu": silu, "sigmoid": sigmoid, "softplus": softplus}


def activation(x, kind: str) -> Node:
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


def softmax(x, axis=-1) -> Node:
    x = as_node(x)
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_node(s, (x,), bw, "softmax")


def log_softmax(x, axis=-1) -> Node:
    x = as_node(x)
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (x,), bw, "log_softmax")


def to_channels_last(x) -> Node:
    return as_node(x).transpose((0, 2, 3, 1))


def to_channels_first(x) -> Node:
    return as_node(x).transpose((0, 3, 1, 2))


def depthwise_conv_tokens(x, weight, bias=None) -> Node:
    """Depthwise 'same' conv applied to a channel-last B×H×W×C map."""
    k = weight.shape[-1]
    c = as_node(x).shape[-1]
    y = conv2d(to_channels_first(x), weight, bias, stride=1, padding=k // 2, groups=c)
    return to_channels_last(y)
