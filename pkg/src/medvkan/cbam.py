"""Convolutional block attention used to refine encoder skip features."""
from __future__ import annotations

from . import functional as F
from . import init
from .tensor import Node, amax, as_node, concat, mean


def init_cbam(rng, c, reduction, dtype) -> dict:
    if reduction < 1 or c % reduction:
        raise ValueError(f"CBAM: {c} channels not divisible by reduction {reduction}")
    hidden = c // reduction
    return {
        "down": init.conv(rng, hidden, c, 1, dtype),
        "up": init.conv(rng, c, hidden, 1, dtype),
        "spatial": init.conv(rng, 1, 2, 7, dtype),
    }


def _squeeze(v, params):
    h = F.relu(F.conv2d(v, params["down"]["weight"], params["down"]["bias"]))
    return F.conv2d(h, params["up"]["weight"], params["up"]["bias"])


def channel_attention(x, params) -> Node:
    """B×C×1×1 scores from the shared bottleneck over global max and mean."""
    x = as_node(x)
    mx = F.pool2d(x, "max", "global")
    av = F.pool2d(x, "avg", "global")
    return F.sigmoid(_squeeze(mx, params) + _squeeze(av, params))


def spatial_attention(x, params) -> Node:
    """B×1×H×W scores from a 7×7 conv over the channel max and mean maps."""
    x = as_node(x)
    desc = concat([amax(x, axis=1, keepdims=True), mean(x, axis=1, keepdims=True)], axis=1)
    return F.sigmoid(F.conv2d(desc, params["spatial"]["weight"], params["spatial"]["bias"], padding=3))


def cbam_apply(x, params) -> Node:
    x = as_node(x)
    refined = channel_attention(x, params) * x
    refined = spatial_attention(refined, params) * refined
    return F.relu(x + refined)
