"""The feature-enhancement network.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names. Every
scale stream reads the same ``ufen.*`` entries, so weight sharing is
structural rather than copied.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Dict, NamedTuple

import numpy as np

from . import tensor as T
from .color import apply_white_balance
from .tensor import Tensor

Params = Dict[str, Tensor]

STAT_EPS = 1e-5
DENSE_LAYERS = 6


@dataclass
class NetConfig:
    cf_channels: int = 32
    dense_growth: int = 8
    leaky_slope: float = 0.01
    residual_target: str = "original"
    safa_heads: int = 8
    head_channels: int = 16

    def __post_init__(self) -> None:
        if self.residual_target not in ("original", "corrected"):
            raise ValueError(f"residual_target must be 'original' or 'corrected', got {self.residual_target!r}")
        if self.cf_channels % self.safa_heads:
            raise ValueError(f"safa_heads={self.safa_heads} must divide cf_channels={self.cf_channels}")
        if not 0 < self.leaky_slope < 1:
            raise ValueError(f"leaky_slope must be in (0, 1), got {self.leaky_slope}")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# ------------------------------------------------------------------ params


def param_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every enhancer tensor, in a fixed order."""
    cf, g = cfg.cf_channels, cfg.dense_growth
    shapes: dict[str, tuple[int, ...]] = {}

    def special(prefix, cin, cout):
        shapes[f"{prefix}.weight"] = (cout, cin, 3, 3)
        shapes[f"{prefix}.bias"] = (cout,)
        shapes[f"{prefix}.stat_weight"] = (cout, 2 * cin, 1, 1)
        shapes[f"{prefix}.stat_bias"] = (cout,)

    def conv(prefix, cin, cout, k):
        shapes[f"{prefix}.weight"] = (cout, cin, k, k)
        shapes[f"{prefix}.bias"] = (cout,)

    special("ufen.special", 3, cf)
    for i in range(1, DENSE_LAYERS + 1):
        conv(f"ufen.conv{i}", cf + (i - 1) * g, g, 3)
    conv("ufen.proj", DENSE_LAYERS * g, cf, 1)
    conv("safa.q1", cf, cf, 3)
    conv("safa.q2", cf, cf, 3)
    conv("safa.k", cf, cf, 1)
    d = cf // cfg.safa_heads
    for h in range(cfg.safa_heads):
        conv(f"safa.head{h}", 2 * d, 2, 1)
    conv("agg", 2 * cf, cf, 3)
    special("out.special", cf, 3)
    return shapes


def _fan_in(shape) -> int:
    return int(np.prod(shape[1:]))


def init_params(cfg: NetConfig, rng: np.random.Generator, dtype=None) -> Params:
    """He-uniform conv weights, zero biases, neutral SpecialConv multipliers.

    The whole output stage starts at zero so the network begins as the
    identity enhancement.
    """
    dtype = dtype or T.default_dtype()
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".weight") and not name.startswith("out."):
            bound = np.sqrt(6.0 / _fan_in(shape))
            arr = rng.uniform(-bound, bound, size=shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return params


# ------------------------------------------------------------------ layers


def special_conv(x: Tensor, params: Params, prefix: str) -> Tensor:
    """3x3 conv whose output channels are rescaled by statistics of the input.

    multiplier = 2 * sigmoid(A @ [mean; std] + b), one value per output
    channel and sample, so it always lies in (0, 2).
    """
    w = params[f"{prefix}.weight"]
    if w.shape[1] != x.shape[1]:
        raise ValueError(f"special_conv {prefix}: input {x.shape} does not match weight {w.shape}")
    mu, sd = T.channel_stats(x, eps=STAT_EPS)
    logits = T.conv2d(T.concat_channels(mu, sd), params[f"{prefix}.stat_weight"], params[f"{prefix}.stat_bias"])
    mult = T.mul(T.sigmoid(logits), 2.0)
    feat = T.conv2d(x, w, params[f"{prefix}.bias"], stride=1, padding=1)
    return T.mul(feat, mult)


class ScalePyramid(NamedTuple):
    full: Tensor
    quarter: Tensor
    eighth: Tensor
    height: int  # unpadded size
    width: int


def padded_size(n: int) -> int:
    return -(-n // 8) * 8


def build_scale_pyramid(corrected: Tensor) -> ScalePyramid:
    """Reflect-pad to a multiple of 8 and resample to 1/4 and 1/8 scale."""
    _, _, h, w = corrected.shape
    hp, wp = padded_size(h), padded_size(w)
    full = T.reflect_pad(corrected, hp - h, wp - w)
    quarter = T.bilinear_resize(full, hp // 4, wp // 4)
    eighth = T.bilinear_resize(full, hp // 8, wp // 8)
    return ScalePyramid(full, quarter, eighth, h, w)


def ufen_forward(x: Tensor, params: Params, cfg: NetConfig) -> Tensor:
    """Shared encoder: SpecialConv then six densely connected 3x3 convs.

    Layer i sees the concatenation of all earlier outputs; a 1x1 projection
    of layers 1..6 gives ``cf_channels`` output maps at the input size.
    """
    if x.shape[1] != 3:
        raise ValueError(f"ufen_forward expects 3-channel input, got {x.shape}")
    slope = cfg.leaky_slope
    outs = [T.leaky_relu(special_conv(x, params, "ufen.special"), slope)]
    for i in range(1, DENSE_LAYERS + 1):
        inp = outs[0] if i == 1 else T.concat_channels(*outs)
        y = T.conv2d(inp, params[f"ufen.conv{i}.weight"], params[f"ufen.conv{i}.bias"], padding=1)
        outs.append(T.leaky_relu(y, slope))
    return T.conv2d(T.concat_channels(*outs[1:]), params["ufen.proj.weight"], params["ufen.proj.bias"])


def safa_fuse(feat_full: Tensor, feat_quarter: Tensor, params: Params, cfg: NetConfig, weights_out: list | None = None) -> Tensor:
    """Per-position, per-head softmax blend of full- and quarter-scale features.

    Queries come from two stride-2 convs on the full-res map, keys from a
    1x1 conv on the quarter-res map. Each head turns its [Q_h; K_h] slice
    into two logits; the softmax weights mix Q_h and K_h. If ``weights_out``
    is given, each head's (N, 2, h, w) weight tensor is appended to it.
    """
    fh, fw = feat_full.shape[2:]
    qh, qw = feat_quarter.shape[2:]
    if (fh, fw) != (4 * qh, 4 * qw):
        raise ValueError(f"safa_fuse needs a 4x resolution ratio, got {feat_full.shape} and {feat_quarter.shape}")
    cf = feat_quarter.shape[1]
    heads = cfg.safa_heads
    if cf % heads:
        raise ValueError(f"safa_fuse: {cf} channels not divisible by {heads} heads")
    q = T.conv2d(feat_full, params["safa.q1.weight"], params["safa.q1.bias"], stride=2, padding=1)
    q = T.conv2d(T.leaky_relu(q, cfg.leaky_slope), params["safa.q2.weight"], params["safa.q2.bias"], stride=2, padding=1)
    k = T.conv2d(feat_quarter, params["safa.k.weight"], params["safa.k.bias"])
    d = cf // heads
    outs = []
    for h in range(heads):
        q_h = T.slice_channels(q, h * d, (h + 1) * d)
        k_h = T.slice_channels(k, h * d, (h + 1) * d)
        logits = T.conv2d(T.concat_channels(q_h, k_h), params[f"safa.head{h}.weight"], params[f"safa.head{h}.bias"])
        wts = T.softmax_axis(logits, axis=1)
        if weights_out is not None:
            weights_out.append(wts)
        outs.append(T.add(T.mul(q_h, T.slice_channels(wts, 0, 1)), T.mul(k_h, T.slice_channels(wts, 1, 2))))
    return outs[0] if heads == 1 else T.concat_channels(*outs)


def aggregate_final(safa_out: Tensor, feat_eighth: Tensor, params: Params, cfg: NetConfig) -> Tensor:
    sh, sw = safa_out.shape[2:]
    eh, ew = feat_eighth.shape[2:]
    if (sh, sw) != (2 * eh, 2 * ew):
        raise ValueError(f"aggregate_final needs a 2x resolution ratio, got {safa_out.shape} and {feat_eighth.shape}")
    up = T.bilinear_resize(feat_eighth, sh, sw)
    y = T.conv2d(T.concat_channels(safa_out, up), params["agg.weight"], params["agg.bias"], padding=1)
    return T.leaky_relu(y, cfg.leaky_slope)


def residual_map(agg: Tensor, params: Params, padded_hw: tuple[int, int], hw: tuple[int, int]) -> Tensor:
    """Bounded correction in [-1, 1] at the unpadded image size."""
    up = T.bilinear_resize(agg, *padded_hw)
    res = T.tanh_act(special_conv(up, params, "out.special"))
    return T.crop(res, *hw)


def residual_output(agg: Tensor, original: Tensor, params: Params, padded_hw: tuple[int, int]) -> Tensor:
    res = residual_map(agg, params, padded_hw, original.shape[2:])
    return T.clamp(T.add(original, res), 0.0, 1.0)


# ---------------------------------------------------------------- pipeline


class EnhanceTrace(NamedTuple):
    corrected: Tensor
    pyramid: ScalePyramid
    features: tuple[Tensor, Tensor, Tensor]
    fused: Tensor
    aggregated: Tensor
    residual: Tensor
    enhanced: Tensor


def white_balance_batch(images: np.ndarray) -> np.ndarray:
    """Apply white balance to each (3, H, W) sample of an NCHW batch."""
    out = np.empty_like(images)
    for i, img in enumerate(images):
        out[i] = apply_white_balance(img.transpose(1, 2, 0)).transpose(2, 0, 1)
    return out


def enhance_trace(images, params: Params, cfg: NetConfig) -> EnhanceTrace:
    """Full forward pass on an NCHW batch in [0, 1], keeping intermediates."""
    original = T.as_tensor(images)
    corrected = Tensor(white_balance_batch(original.data))
    pyr = build_scale_pyramid(corrected)
    feats = tuple(ufen_forward(s, params, cfg) for s in (pyr.full, pyr.quarter, pyr.eighth))
    fused = safa_fuse(feats[0], feats[1], params, cfg)
    agg = aggregate_final(fused, feats[2], params, cfg)
    base = original if cfg.residual_target == "original" else corrected
    res = residual_map(agg, params, pyr.full.shape[2:], (pyr.height, pyr.width))
    enhanced = T.clamp(T.add(base, res), 0.0, 1.0)
    return EnhanceTrace(corrected, pyr, feats, fused, agg, res, enhanced)


def enhance_tensor(images, params: Params, cfg: NetConfig) -> Tensor:
    return enhance_trace(images, params, cfg).enhanced


def enhance(image: np.ndarray, params: Params, cfg: NetConfig) -> np.ndarray:
    """Enhance one (H, W, 3) image; output has the same size and dtype.

    The network runs in the parameter dtype; the residual is added to the
    image at the image's own precision.
    """
    dtype = params["ufen.special.weight"].dtype
    batch = image.transpose(2, 0, 1)[None].astype(dtype)
    with T.no_grad():
        res = enhance_trace(batch, params, cfg).residual.data
    res = res[0].transpose(1, 2, 0).astype(image.dtype)
    base = image if cfg.residual_target == "original" else apply_white_balance(image)
    return np.clip(base + res, 0.0, 1.0)
