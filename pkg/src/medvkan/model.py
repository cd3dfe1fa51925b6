"""The MedVKAN encoder-decoder: conv stages, VKAN stages, CBAM skips, deep supervision."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import functional as F
from . import init
from .cbam import cbam_apply, init_cbam
from .kan import EFCONV_MODES, SplineGrid, init_vkan_block, vkan_block
from .losses import DS_WEIGHTS
from .tensor import Node, as_node, concat

INPUT_MULTIPLE = 32


@dataclass
class ModelConfig:
    in_channels: int = 3
    num_classes: int = 2
    stage_channels: list = field(default_factory=lambda: [48, 96, 192, 384, 768])
    decoder_head_channels: int = 24
    d_state: int = 16
    spline: dict = field(default_factory=lambda: {"k": 3, "G": 5, "range": [-1.0, 1.0]})
    cbam_reduction: int = 16
    efconv_mode: str = "conv3x2"
    deep_supervision: bool = True
    ds_weights: list = field(default_factory=lambda: list(DS_WEIGHTS))
    share_scan_params: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        ch = list(self.stage_channels)
        if len(ch) != 5:
            raise ValueError(f"stage_channels needs 5 entries, got {len(ch)}")
        if any(b != 2 * a for a, b in zip(ch, ch[1:])):
            raise ValueError(f"each stage must double the previous width, got {ch}")
        if self.in_channels < 1 or self.num_classes < 2:
            raise ValueError("need in_channels >= 1 and num_classes >= 2")
        if self.efconv_mode not in EFCONV_MODES:
            raise ValueError(f"efconv_mode must be one of {EFCONV_MODES}, got {self.efconv_mode!r}")
        if len(self.ds_weights) != 4:
            raise ValueError("ds_weights needs 4 entries")
        for c in ch[:3]:
            if c % self.cbam_reduction:
                raise ValueError(f"skip width {c} not divisible by cbam_reduction {self.cbam_reduction}")
        self.grid  # validates spline settings

    @property
    def grid(self) -> SplineGrid:
        lo, hi = self.spline["range"]
        return SplineGrid(k=int(self.spline["k"]), G=int(self.spline["G"]), lo=float(lo), hi=float(hi))

    @classmethod
    def full(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        base = dict(
            in_channels=1,
            stage_channels=[8, 16, 32, 64, 128],
            d_state=4,
            cbam_reduction=4,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


# -- building blocks ---------------------------------------------------------

def _init_conv_bn_relu(rng, cin, cout, dtype):
    return {"conv": init.conv(rng, cout, cin, 3, dtype), "bn": init.batch_norm(cout, dtype)}


def conv_bn_relu(x, p, training) -> Node:
    y = F.conv2d(x, p["conv"]["weight"], p["conv"]["bias"], padding=1)
    bn = p["bn"]
    y = F.batch_norm2d(y, bn["gamma"], bn["beta"], bn["running_mean"].value, bn["running_var"].value, training)
    return F.relu(y)


def init_encoder_conv_stage(rng, cin, cout, dtype):
    return [_init_conv_bn_relu(rng, cin, cout, dtype), _init_conv_bn_relu(rng, cout, cout, dtype)]


def encoder_conv_stage(x, params, training=False):
    """Two conv-BN-ReLU rounds then 2×2 max pooling; returns (pre_pool, pooled)."""
    x = as_node(x)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"encoder stage needs even spatial dims, got {x.shape[2:]}")
    for p in params:
        x = conv_bn_relu(x, p, training)
    return x, F.pool2d(x, "max", 2)


def patch_embed(x, params) -> Node:
    """Stride-2 2×2 conv, output in channel-last layout."""
    x = as_node(x)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"patch_embed needs even spatial dims, got {x.shape[2:]}")
    return F.to_channels_last(F.conv2d(x, params["weight"], params["bias"], stride=2))


def patch_merge(x, weight) -> Node:
    """Concatenate the four pixel-parity sub-grids (4C) and project to 2C."""
    x = as_node(x)
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"patch_merge needs even spatial dims, got {h}x{w}")
    parts = [x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]]
    return F.linear(concat(parts, axis=-1), weight)


def patch_expand(x, weight) -> Node:
    """Project C -> 2C and unfold into a 2×2 block of C/2 channels (inverse merge layout)."""
    x = as_node(x)
    b, h, w, c = x.shape
    if c % 2:
        raise ValueError(f"patch_expand needs an even channel count, got {c}")
    y = F.linear(x, weight)
    half = y.shape[-1] // 4
    # channel groups are ordered (dw, dh) to mirror patch_merge
    y = y.reshape(b, h, w, 2, 2, half).transpose((0, 1, 4, 2, 3, 5))
    return y.reshape(b, 2 * h, 2 * w, half)


def decoder_fuse(up, skip, params) -> Node:
    """Channel concat then a 1×1 projection back to the input width."""
    up, skip = as_node(up), as_node(skip)
    if up.shape != skip.shape:
        raise ValueError(f"decoder_fuse shape mismatch: {up.shape} vs {skip.shape}")
    return F.linear(concat([up, skip], axis=-1), params["weight"], params["bias"])


def _init_decoder_conv_stage(rng, cin, cout, skip_ch, dtype):
    return {
        "up": {
            "weight": init.uniform(rng, (cin, cout, 2, 2), cout * 4, dtype),
            "bias": init.uniform(rng, (cout,), cout * 4, dtype),
        },
        "convs": [_init_conv_bn_relu(rng, cout + skip_ch, cout, dtype), _init_conv_bn_relu(rng, cout, cout, dtype)],
    }


def decoder_conv_stage(x, skip, params, training=False) -> Node:
    y = F.conv_transpose2d(x, params["up"]["weight"], params["up"]["bias"], stride=2)
    if skip is not None:
        y = concat([y, skip], axis=1)
    for p in params["convs"]:
        y = conv_bn_relu(y, p, training)
    return y


# -- whole network -----------------------------------------------------------

def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> dict:
    """Build the full named parameter tree; deterministic in ``seed``."""
    c1, c2, c3, c4, c5 = config.stage_channels
    ch = config.decoder_head_channels
    k = config.num_classes
    grid, mode, n = config.grid, config.efconv_mode, config.d_state
    shared = config.share_scan_params
    rng = init.make_rng(seed, 0)
    params = {
        "enc1": init_encoder_conv_stage(rng, config.in_channels, c1, dtype),
        "enc2": init_encoder_conv_stage(rng, c1, c2, dtype),
        "enc3": init_encoder_conv_stage(rng, c2, c3, dtype),
        "patch_embed": init.conv(rng, c4, c3, 2, dtype),
        "vkan_e4": init_vkan_block(rng, c4, n, grid, mode, dtype, shared),
        "patch_merge": {"weight": init.uniform(rng, (c5, 4 * c4), 4 * c4, dtype)},
        "vkan_e5": init_vkan_block(rng, c5, n, grid, mode, dtype, shared),
        "cbam1": init_cbam(rng, c1, config.cbam_reduction, dtype),
        "cbam2": init_cbam(rng, c2, config.cbam_reduction, dtype),
        "cbam3": init_cbam(rng, c3, config.cbam_reduction, dtype),
        "expand5": {"weight": init.uniform(rng, (2 * c5, c5), c5, dtype)},
        "fuse4": init.dense(rng, c4, 2 * c4, dtype),
        "vkan_d5": init_vkan_block(rng, c4, n, grid, mode, dtype, shared),
        "expand4": {"weight": init.uniform(rng, (2 * c4, c4), c4, dtype)},
        "fuse3": init.dense(rng, c3, 2 * c3, dtype),
        "vkan_d4": init_vkan_block(rng, c3, n, grid, mode, dtype, shared),
        "dec3": _init_decoder_conv_stage(rng, c3, c2, c2, dtype),
        "dec2": _init_decoder_conv_stage(rng, c2, c1, c1, dtype),
        "dec1": _init_decoder_conv_stage(rng, c1, ch, 0, dtype),
        "head": init.conv(rng, k, ch, 1, dtype),
    }
    if config.deep_supervision:
        params["ds_heads"] = [
            init.conv(rng, k, c1, 1, dtype),
            init.conv(rng, k, c2, 1, dtype),
            init.conv(rng, k, c3, 1, dtype),
        ]
    return params


def check_input(shape, config: ModelConfig):
    if len(shape) != 4:
        raise ValueError(f"expected a B×C×H×W image batch, got shape {tuple(shape)}")
    if shape[1] != config.in_channels:
        raise ValueError(f"model expects {config.in_channels} input channels, got {shape[1]}")
    h, w = shape[2], shape[3]
    if h % INPUT_MULTIPLE or w % INPUT_MULTIPLE or h == 0 or w == 0:
        raise ValueError(f"input spatial dims must be positive multiples of {INPUT_MULTIPLE}, got {h}x{w}")


def _head(x, p):
    return F.conv2d(x, p["weight"], p["bias"])


def forward(image, params, config: ModelConfig, training=False, scan_mode="blocked", return_features=False):
    """Logits per head: full resolution first, then 1/2, 1/4, 1/8 when deep supervision is on."""
    image = as_node(image)
    check_input(image.shape, config)
    mode = config.efconv_mode
    feats = {}

    _, x_e1 = encoder_conv_stage(image, params["enc1"], training)
    _, x_e2 = encoder_conv_stage(x_e1, params["enc2"], training)
    _, x_e3 = encoder_conv_stage(x_e2, params["enc3"], training)
    x_e4 = vkan_block(patch_embed(x_e3, params["patch_embed"]), params["vkan_e4"], mode, scan_mode)
    x_e5 = vkan_block(patch_merge(x_e4, params["patch_merge"]["weight"]), params["vkan_e5"], mode, scan_mode)

    s1 = cbam_apply(x_e1, params["cbam1"])
    s2 = cbam_apply(x_e2, params["cbam2"])
    s3 = cbam_apply(x_e3, params["cbam3"])

    up = patch_expand(x_e5, params["expand5"]["weight"])
    x_d5 = vkan_block(decoder_fuse(up, x_e4, params["fuse4"]), params["vkan_d5"], mode, scan_mode)
    up = patch_expand(x_d5, params["expand4"]["weight"])
    x_d4 = vkan_block(decoder_fuse(up, F.to_channels_last(s3), params["fuse3"]), params["vkan_d4"], mode, scan_mode)
    x_d4 = F.to_channels_first(x_d4)
    x_d3 = decoder_conv_stage(x_d4, s2, params["dec3"], training)
    x_d2 = decoder_conv_stage(x_d3, s1, params["dec2"], training)
    x_d1 = decoder_conv_stage(x_d2, None, params["dec1"], training)

    outputs = [_head(x_d1, params["head"])]
    if config.deep_supervision:
        for feat, p in zip((x_d2, x_d3, x_d4), params["ds_heads"]):
            outputs.append(_head(feat, p))
    if return_features:
        feats.update(x_e1=x_e1, x_e2=x_e2, x_e3=x_e3, x_e4=x_e4, x_e5=x_e5, s1=s1, s2=s2, s3=s3,
                     x_d5=x_d5, x_d4=x_d4, x_d3=x_d3, x_d2=x_d2, x_d1=x_d1)
        return outputs, feats
    return outputs


def param_breakdown(params) -> dict:
    """Trainable scalar count per top-level module, in tree order."""
    seen = set()
    out = {}
    for name, leaf in init.flatten(params).items():
        if not leaf.requires_grad or id(leaf) in seen:
            continue
        seen.add(id(leaf))
        top = name.split(".", 1)[0]
        out[top] = out.get(top, 0) + int(leaf.value.size)
    return out


def param_count(config: ModelConfig) -> tuple[int, dict]:
    """Total trainable scalars and the per-module breakdown for ``config``."""
    breakdown = param_breakdown(init_params(config, seed=0, dtype=np.float32))
    return sum(breakdown.values()), breakdown
