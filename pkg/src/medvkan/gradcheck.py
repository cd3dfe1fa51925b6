"""Float64 finite-difference suites for every differentiable block.

Each check perturbs the freshly initialised parameters with Gaussian noise
first.  At init many gradients are ~1e-9 (e.g. the state decay of an S6 with
tiny step sizes) and central differences cannot resolve them, so the relative
metric would measure rounding noise instead of the backward rule.
"""
from __future__ import annotations

import numpy as np

from . import functional as F
from . import init
from .cbam import cbam_apply, init_cbam
from .init import make_rng
from .kan import (EFCONV_MODES, SplineGrid, efc_kan, init_efc_kan, init_kan_linear, init_tok_kan,
                  init_vkan_block, kan_linear, tok_kan, vkan_block)
from .losses import cross_entropy_loss, deep_supervision_loss, soft_dice_loss
from .model import ModelConfig, decoder_fuse, forward, init_params
from .scan import init_s6, init_ss2d, init_vss_layer, selective_scan, ss2d, vss_layer
from .tensor import finite_diff_check

F64 = np.float64
BLOCK_TOL = 1e-4
NET_TOL = 1e-3
MODULES = ("tensor", "scan", "kan", "cbam", "losses", "net")


def randomize(params, rng, scale=0.2):
    """Add N(0, scale) noise to every trainable leaf, in place.

    S6 step-size biases are redrawn from U(-1, 0.5) so softplus(Δ) is O(1).
    """
    for name, leaf in init.trainable(params).items():
        if name.endswith("dt_proj.bias"):
            leaf.value = rng.uniform(-1.0, 0.5, size=leaf.value.shape).astype(leaf.value.dtype)
        else:
            leaf.value = leaf.value + rng.normal(0.0, scale, size=leaf.value.shape).astype(leaf.value.dtype)
    return params


def check_block(apply, x, params, rng, max_coords=None):
    """Max relative error of d(Σ R·apply(x, params))/d(x, params) for a fixed random R.

    ``max_coords`` caps the number of probed coordinates (sampled uniformly);
    ``None`` probes every one.
    """
    leaves = list(init.trainable(params).values()) if params is not None else []
    arrays = [np.asarray(x, dtype=F64)] + [leaf.value for leaf in leaves]
    slot = {id(leaf): i + 1 for i, leaf in enumerate(leaves)}
    proj = None

    def fn(*nodes):
        nonlocal proj
        tree = None
        if params is not None:
            tree = init.map_leaves(params, lambda _, leaf: nodes[slot[id(leaf)]] if id(leaf) in slot else leaf)
        out = apply(nodes[0], tree)
        if proj is None:
            proj = rng.normal(size=out.shape)
        return (out * proj).sum()

    coords = [(i, j) for i, arr in enumerate(arrays) for j in range(arr.size)]
    if max_coords is not None and len(coords) > max_coords:
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[p] for p in sorted(pick)]
    return finite_diff_check(fn, arrays, coords=coords)


def _grid():
    return SplineGrid(k=3, G=5, lo=-1.0, hi=1.0)


# -- suites ----------------------------------------------------------------------

def suite_tensor(seed=0) -> dict:
    rng = make_rng(seed, 100)
    x = rng.normal(size=(2, 4, 4, 4))
    res = {}
    conv = randomize(init.conv(rng, 3, 4, 3, F64), rng)
    res["conv2d"] = check_block(lambda v, p: F.conv2d(v, p["weight"], p["bias"], padding=1), x, conv, rng)
    strided = randomize(init.conv(rng, 3, 4, 2, F64), rng)
    res["conv2d_stride2"] = check_block(lambda v, p: F.conv2d(v, p["weight"], p["bias"], stride=2), x, strided, rng)
    dw = randomize(init.conv(rng, 4, 1, 3, F64), rng)
    res["conv2d_depthwise"] = check_block(
        lambda v, p: F.conv2d(v, p["weight"], p["bias"], padding=1, groups=4), x, dw, rng)
    grouped = randomize(init.conv(rng, 4, 2, 3, F64), rng)
    res["conv2d_grouped"] = check_block(
        lambda v, p: F.conv2d(v, p["weight"], p["bias"], padding=1, groups=2), x, grouped, rng)
    convt = randomize({"weight": init.uniform(rng, (4, 3, 2, 2), 4, F64), "bias": init.zeros(3, F64)}, rng)
    res["conv_transpose2d"] = check_block(
        lambda v, p: F.conv_transpose2d(v, p["weight"], p["bias"], stride=2), x, convt, rng)
    bn = randomize(init.batch_norm(4, F64), rng)
    res["batch_norm2d"] = check_block(
        lambda v, p: F.batch_norm2d(v, p["gamma"], p["beta"], p["running_mean"].value, p["running_var"].value,
                                    training=True), x, bn, rng)
    ln = randomize(init.norm(4, F64), rng)
    res["layer_norm"] = check_block(lambda v, p: F.layer_norm(v, p["gamma"], p["beta"]), x, ln, rng)
    dense = randomize(init.dense(rng, 5, 4, F64), rng)
    res["linear"] = check_block(lambda v, p: F.linear(v, p["weight"], p["bias"]), x, dense, rng)
    res["max_pool"] = check_block(lambda v, _: F.pool2d(v, "max", 2), x, None, rng)
    res["avg_pool"] = check_block(lambda v, _: F.pool2d(v, "avg", 2), x, None, rng)
    res["global_pool"] = check_block(lambda v, _: F.pool2d(v, "max", "global") + F.pool2d(v, "avg", "global"),
                                     x, None, rng)
    for kind in ("relu", "silu", "sigmoid", "softplus"):
        res[kind] = check_block(lambda v, _, kind=kind: F.activation(v, kind), x, None, rng)
    res["softmax"] = check_block(lambda v, _: F.softmax(v, axis=1), x, None, rng)
    return res


def suite_scan(seed=0) -> dict:
    rng = make_rng(seed, 200)
    res = {}
    d, n = 6, 4
    s6 = randomize(init_s6(rng, d, n, F64), rng)
    res["selective_scan"] = check_block(lambda v, p: selective_scan(v, p, "blocked"),
                                        rng.normal(size=(2, 20, d)), s6, rng)
    res["selective_scan_naive"] = check_block(lambda v, p: selective_scan(v, p, "naive"),
                                              rng.normal(size=(1, 12, d)), s6, rng)
    x = rng.normal(size=(1, 4, 5, d))
    res["ss2d"] = check_block(lambda v, p: ss2d(v, p), x, randomize(init_ss2d(rng, d, n, F64), rng), rng)
    c = 4
    x = rng.normal(size=(2, 4, 4, c))
    vss = randomize(init_vss_layer(rng, c, n, F64), rng)
    res["vss_layer"] = check_block(lambda v, p: vss_layer(v, p), x, vss, rng, max_coords=400)
    return res


def suite_kan(seed=0) -> dict:
    rng = make_rng(seed, 300)
    grid = _grid()
    res = {}
    # Spread tokens over (and slightly beyond) the grid, away from knots.
    x = rng.uniform(-1.1, 1.1, size=(2, 12, 4))
    knots = grid.knots
    x = np.where(np.min(np.abs(x[..., None] - knots), axis=-1) < 1e-3, x + 3e-3, x)
    kl = randomize(init_kan_linear(rng, 4, 3, grid, F64), rng)
    res["kan_linear"] = check_block(lambda v, p: kan_linear(v, p), x, kl, rng)
    c = 4
    xm = rng.normal(size=(2, 4, 4, c))
    tok = randomize(init_tok_kan(rng, c, grid, F64), rng)
    res["tok_kan"] = check_block(lambda v, p: tok_kan(v, p), xm, tok, rng, max_coords=400)
    for mode in EFCONV_MODES:
        efc = randomize(init_efc_kan(rng, c, grid, mode, F64), rng)
        res[f"efc_kan_{mode}"] = check_block(lambda v, p, mode=mode: efc_kan(v, p, mode), xm, efc, rng,
                                             max_coords=300)
    vk = randomize(init_vkan_block(rng, c, 4, grid, "conv3x2", F64), rng)
    res["vkan_block"] = check_block(lambda v, p: vkan_block(v, p, "conv3x2"), rng.normal(size=(1, 4, 4, c)), vk,
                                    rng, max_coords=200)
    return res


def suite_cbam(seed=0) -> dict:
    rng = make_rng(seed, 400)
    res = {}
    c = 8
    p = randomize(init_cbam(rng, c, 4, F64), rng)
    res["cbam_apply"] = check_block(lambda v, q: cbam_apply(v, q), rng.normal(size=(2, c, 6, 6)), p, rng)
    fuse = randomize(init.dense(rng, c, 2 * c, F64), rng)
    skip = rng.normal(size=(1, 4, 4, c))
    res["decoder_fuse"] = check_block(lambda v, q: decoder_fuse(v, skip, q), rng.normal(size=(1, 4, 4, c)), fuse, rng)
    return res


def suite_losses(seed=0) -> dict:
    rng = make_rng(seed, 500)
    logits = rng.normal(size=(2, 3, 4, 4))
    mask = rng.integers(0, 3, size=(2, 4, 4))
    res = {
        "soft_dice_loss": check_block(lambda v, _: soft_dice_loss(F.softmax(v, axis=1), mask), logits, None, rng),
        "cross_entropy_loss": check_block(lambda v, _: cross_entropy_loss(v, mask), logits, None, rng),
    }
    ds_logits = [rng.normal(size=(1, 3, 8 // f, 8 // f)) for f in (1, 2, 4, 8)]
    ds_mask = rng.integers(0, 3, size=(1, 8, 8))

    def ds(v, _):
        return deep_supervision_loss([v] + ds_logits[1:], ds_mask)

    res["deep_supervision_loss"] = check_block(ds, ds_logits[0], None, rng)
    return res


def suite_net(seed=0, n_params=20, step=1e-4) -> dict:
    """End to end through the tiny model on one 64×64 image, ``n_params`` sampled weights.

    The loss sums hundreds of thousands of terms, so its rounding noise is
    ~1e-15·|loss|; a 1e-4 step keeps that well below gradients of ~1e-9.
    """
    rng = make_rng(seed, 600)
    config = ModelConfig.tiny()
    params = randomize(init_params(config, seed=seed, dtype=F64), rng, scale=0.05)
    image = rng.uniform(0.0, 1.0, size=(1, config.in_channels, 64, 64))
    mask = rng.integers(0, config.num_classes, size=(1, 64, 64))
    leaves = list(init.trainable(params).values())
    sizes = np.array([leaf.value.size for leaf in leaves])
    flat = rng.choice(sizes.sum(), size=n_params, replace=False)
    bounds = np.cumsum(sizes)
    coords = []
    for f in sorted(flat):
        i = int(np.searchsorted(bounds, f, side="right"))
        coords.append((i + 1, int(f - (bounds[i] - sizes[i]))))
    slot = {id(leaf): i + 1 for i, leaf in enumerate(leaves)}

    def fn(*nodes):
        tree = init.map_leaves(params, lambda _, leaf: nodes[slot[id(leaf)]] if id(leaf) in slot else leaf)
        return deep_supervision_loss(forward(nodes[0], tree, config, training=False), mask)

    arrays = [image] + [leaf.value for leaf in leaves]
    return {"net_tiny_64": finite_diff_check(fn, arrays, step=step, coords=coords)}


SUITES = {
    "tensor": suite_tensor,
    "scan": suite_scan,
    "kan": suite_kan,
    "cbam": suite_cbam,
    "losses": suite_losses,
    "net": suite_net,
}


def tolerance(name: str) -> float:
    return NET_TOL if name.startswith("net") else BLOCK_TOL


def run(modules=("all",), seed=0) -> dict:
    """Run the named suites (``"all"`` for every one); returns op name -> max relative error."""
    if "all" in modules:
        modules = MODULES
    out = {}
    for m in modules:
        if m not in SUITES:
            raise ValueError(f"unknown gradcheck module {m!r}; expected one of {('all',) + MODULES}")
        out.update(SUITES[m](seed))
    return out
