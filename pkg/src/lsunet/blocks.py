"""Building blocks of the segmentation network.

Two block families do the real work: a light convolutional block built
from a 3x3 conv plus depthwise/pointwise stages, and a tokenized shift
block that mixes spatial information by shifting channel groups one pixel
and fusing the branches with split attention.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import (BatchNorm2d, Conv2d, DepthwiseConv2d, GroupNorm, Linear,
                 Module, default_gn_groups)
from .tensor import Tensor, register_op


def _check_shift_input(x: Tensor) -> tuple:
    if x.ndim != 4:
        raise ShapeError(f"spatial shift input must be 4-D, got {x.shape}")
    n, c, h, w = x.data.shape
    if c % 4 != 0:
        raise ConfigError(f"spatial shift needs channels divisible by 4, got {c}")
    if h < 1 or w < 1:
        raise ShapeError(f"spatial shift needs h, w >= 1, got {h}x{w}")
    # a size-1 axis has no interior to move: the shift degenerates to identity
    return n, c, h, w


def spatial_shift_a(x: Tensor) -> Tensor:
    """Shift the four channel quarters by one pixel: down/up along h, then
    right/left along w. Sources read a snapshot of the input, so the
    boundary line that receives no assignment keeps its original values.
    """
    _, c, h, w = _check_shift_input(x)
    q = c // 4
    s = x.data
    out = s.copy()
    out[:, 0 * q:1 * q, 1:, :] = s[:, 0 * q:1 * q, :h - 1, :]
    out[:, 1 * q:2 * q, :h - 1, :] = s[:, 1 * q:2 * q, 1:, :]
    out[:, 2 * q:3 * q, :, 1:] = s[:, 2 * q:3 * q, :, :w - 1]
    out[:, 3 * q:4 * q, :, :w - 1] = s[:, 3 * q:4 * q, :, 1:]

    def bwd(g):
        gx = np.zeros_like(g)
        gx[:, 0 * q:1 * q, :h - 1, :] += g[:, 0 * q:1 * q, 1:, :]
        gx[:, 0 * q:1 * q, 0, :] += g[:, 0 * q:1 * q, 0, :]
        gx[:, 1 * q:2 * q, 1:, :] += g[:, 1 * q:2 * q, :h - 1, :]
        gx[:, 1 * q:2 * q, h - 1, :] += g[:, 1 * q:2 * q, h - 1, :]
        gx[:, 2 * q:3 * q, :, :w - 1] += g[:, 2 * q:3 * q, :, 1:]
        gx[:, 2 * q:3 * q, :, 0] += g[:, 2 * q:3 * q, :, 0]
        gx[:, 3 * q:4 * q, :, 1:] += g[:, 3 * q:4 * q, :, :w - 1]
        gx[:, 3 * q:4 * q, :, w - 1] += g[:, 3 * q:4 * q, :, w - 1]
        return (gx,)

    return register_op("spatial_shift_a", out, (x,), bwd)


def spatial_shift_b(x: Tensor) -> Tensor:
    """Same scheme as :func:`spatial_shift_a` with the roles of h and w
    exchanged: the first two quarters move along w, the last two along h.
    """
    _, c, h, w = _check_shift_input(x)
    q = c // 4
    s = x.data
    out = s.copy()
    out[:, 0 * q:1 * q, :, 1:] = s[:, 0 * q:1 * q, :, :w - 1]
    out[:, 1 * q:2 * q, :, :w - 1] = s[:, 1 * q:2 * q, :, 1:]
    out[:, 2 * q:3 * q, 1:, :] = s[:, 2 * q:3 * q, :h - 1, :]
    out[:, 3 * q:4 * q, :h - 1, :] = s[:, 3 * q:4 * q, 1:, :]

    def bwd(g):
        gx = np.zeros_like(g)
        gx[:, 0 * q:1 * q, :, :w - 1] += g[:, 0 * q:1 * q, :, 1:]
        gx[:, 0 * q:1 * q, :, 0] += g[:, 0 * q:1 * q, :, 0]
        gx[:, 1 * q:2 * q, :, 1:] += g[:, 1 * q:2 * q, :, :w - 1]
        gx[:, 1 * q:2 * q, :, w - 1] += g[:, 1 * q:2 * q, :, w - 1]
        gx[:, 2 * q:3 * q, :h - 1, :] += g[:, 2 * q:3 * q, 1:, :]
        gx[:, 2 * q:3 * q, 0, :] += g[:, 2 * q:3 * q, 0, :]
        gx[:, 3 * q:4 * q, 1:, :] += g[:, 3 * q:4 * q, :h - 1, :]
        gx[:, 3 * q:4 * q, h - 1, :] += g[:, 3 * q:4 * q, h - 1, :]
        return (gx,)

    return register_op("spatial_shift_b", out, (x,), bwd)


class SplitAttention(Module):
    """Fuses three same-shape branches with learned per-channel weights.

    Each branch is global-average-pooled to a channel vector; the pooled
    vectors are summed and passed through a two-layer MLP producing three
    logits per channel. A softmax across the branches yields convex
    per-channel weights that recombine the branches.
    """

    def __init__(self, channels: int, *, rng: np.random.Generator, dtype=T.DEFAULT_DTYPE):
        super().__init__()
        self.channels = channels
        hidden = max(4, channels // 4)
        self.fc1 = Linear(channels, hidden, rng=rng, dtype=dtype)
        self.fc2 = Linear(hidden, 3 * channels, rng=rng, dtype=dtype)

    def branch_weights(self, parts: list[Tensor]) -> Tensor:
        if len(parts) != 3:
            raise ShapeError(f"split attention expects 3 parts, got {len(parts)}")
        shape = parts[0].shape
        for p in parts[1:]:
            if p.shape != shape:
                raise ShapeError(f"split attention parts disagree: {p.shape} vs {shape}")
        n, c = shape[0], shape[1]
        pooled = parts[0].mean(axis=(2, 3))
        for p in parts[1:]:
            pooled = pooled + p.mean(axis=(2, 3))
        logits = self.fc2(T.gelu(self.fc1(pooled)))
        return T.softmax(T.reshape(logits, (n, 3, c)), axis=1)

    def forward(self, parts: list[Tensor]) -> Tensor:
        weights = self.branch_weights(parts)
        n, c = parts[0].shape[0], parts[0].shape[1]
        out = None
        for k, p in enumerate(parts):
            wk = T.reshape(T.narrow(weights, 1, k, 1), (n, c, 1, 1))
            term = wk * p
            out = term if out is None else out + term
        return out


def split_attention_fuse(parts: list[Tensor], attn: SplitAttention) -> Tensor:
    return attn(parts)


class SpatialShiftBlock(Module):
    """Residual shift mixer: expand channels x3, shift two of the three
    parts in opposite axis orders, fuse with split attention, add input.

    ``variant`` selects which shift order goes to which moving part; it
    alternates between consecutive blocks in the full network.
    """

    def __init__(self, channels: int, variant: str = "A", *,
                 rng: np.random.Generator, dtype=T.DEFAULT_DTYPE):
        super().__init__()
        if variant not in ("A", "B"):
            raise ConfigError(f"shift variant must be 'A' or 'B', got {variant!r}")
        if channels % 4 != 0:
            raise ConfigError(f"spatial shift block needs channels divisible by 4, got {channels}")
        self.channels = channels
        self.variant = variant
        self.expand_pw = Conv2d(channels, 3 * channels, 1, rng=rng, dtype=dtype)
        self.attn = SplitAttention(channels, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        c = self.channels
        if x.shape[1] != c:
            raise ShapeError(f"spatial shift block built for {c} channels, got input {x.shape}")
        expanded = self.expand_pw(x)
        still = T.narrow(expanded, 1, 0, c)
        move1 = T.narrow(expanded, 1, c, c)
        move2 = T.narrow(expanded, 1, 2 * c, c)
        if self.variant == "A":
            move1, move2 = spatial_shift_a(move1), spatial_shift_b(move2)
        else:
            move1, move2 = spatial_shift_b(move1), spatial_shift_a(move2)
        fused = self.attn([still, move1, move2])
        return x + fused


class OverlapPatchEmbed(Module):
    """Strided 3x3 conv producing overlapping patch tokens at half resolution."""

    def __init__(self, in_channels: int, out_channels: int, *,
                 rng: np.random.Generator, dtype=T.DEFAULT_DTYPE):
        super().__init__()
        self.proj = Conv2d(in_channels, out_channels, 3, stride=2, padding=1, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.proj(x)


class TokenizedShiftBlock(Module):
    """Shift-based token mixer with a pointwise residual.

    Pipeline: optional overlap patch embedding (downsampling variant),
    1x1 channel adjust, residual spatial-shift mixing, depthwise conv +
    group norm + 1x1, then a GELU-activated 1x1 pair, plus a 1x1 residual
    from the (post-embedding) block input.
    """

    def __init__(self, in_channels: int, width: int, downsample: bool = False,
                 variant: str = "A", gn_groups: int | None = None, *,
                 rng: np.random.Generator, dtype=T.DEFAULT_DTYPE):
        super().__init__()
        if width % 4 != 0:
            raise ConfigError(f"tokenized shift block width must be divisible by 4, got {width}")
        self.downsample = downsample
        if downsample:
            self.patch_embed = OverlapPatchEmbed(in_channels, width, rng=rng, dtype=dtype)
            inner_in = width
        else:
            self.patch_embed = None
            inner_in = in_channels
        self.pre_pw = Conv2d(inner_in, width, 1, rng=rng, dtype=dtype)
        self.shift = SpatialShiftBlock(width, variant, rng=rng, dtype=dtype)
        self.dws = DepthwiseConv2d(width, 3, stride=1, padding=1, rng=rng, dtype=dtype)
        self.gn = GroupNorm(default_gn_groups(width, gn_groups), width, dtype=dtype)
        self.mix_pw = Conv2d(width, width, 1, rng=rng, dtype=dtype)
        self.act_pw = Conv2d(width, width, 1, rng=rng, dtype=dtype)
        self.out_pw = Conv2d(width, width, 1, rng=rng, dtype=dtype)
        self.residual_pw = Conv2d(inner_in, width, 1, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        base = self.patch_embed(x) if self.patch_embed is not None else x
        mixed = self.shift(self.pre_pw(base))
        mixed = self.mix_pw(self.gn(self.dws(mixed)))
        return self.out_pw(T.gelu(self.act_pw(mixed))) + self.residual_pw(base)


class LightConvBlock(Module):
    """Cheap conv block: 3x3 conv + BN + GELU, then depthwise + group norm
    + 1x1, GELU, and a final 1x1. The encoder variant strides the final
    1x1 (and a 1x1 skip) by 2 to downsample; the decoder variant keeps
    stride 1 with an identity skip.
    """

    def __init__(self, in_channels: int, width: int, mode: str = "encoder",
                 gn_groups: int | None = None, *,
                 rng: np.random.Generator, dtype=T.DEFAULT_DTYPE):
        super().__init__()
        if mode not in ("encoder", "decoder"):
            raise ConfigError(f"light conv mode must be 'encoder' or 'decoder', got {mode!r}")
        self.mode = mode
        stride = 2 if mode == "encoder" else 1
        self.conv3 = Conv2d(in_channels, width, 3, stride=1, padding=1, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(width, dtype=dtype)
        self.dws = DepthwiseConv2d(width, 3, stride=1, padding=1, rng=rng, dtype=dtype)
        self.gn = GroupNorm(default_gn_groups(width, gn_groups), width, dtype=dtype)
        self.pw1 = Conv2d(width, width, 1, rng=rng, dtype=dtype)
        self.pw2 = Conv2d(width, width, 1, stride=stride, rng=rng, dtype=dtype)
        self.skip_pw = Conv2d(width, width, 1, stride=2, rng=rng, dtype=dtype) if mode == "encoder" else None

    def forward(self, x: Tensor) -> Tensor:
        local = T.gelu(self.bn(self.conv3(x)))
        mixed = self.pw1(self.gn(self.dws(local)))
        main = self.pw2(T.gelu(mixed))
        if self.mode == "encoder":
            return main + self.skip_pw(local)
        return main + local


class PlainConvBlock(Module):
    """Ablation stand-in for either block family: one 3x3 conv + BN + GELU,
    strided by 2 in encoder mode."""

    def __init__(self, in_channels: int, width: int, mode: str = "encoder", *,
                 rng: np.random.Generator, dtype=T.DEFAULT_DTYPE):
        super().__init__()
        if mode not in ("encoder", "decoder"):
            raise ConfigError(f"plain conv mode must be 'encoder' or 'decoder', got {mode!r}")
        stride = 2 if mode == "encoder" else 1
        self.conv = Conv2d(in_channels, width, 3, stride=stride, padding=1, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(width, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.gelu(self.bn(self.conv(x)))


def light_conv_encoder(x: Tensor, block: LightConvBlock) -> Tensor:
    if block.mode != "encoder":
        raise ConfigError("light_conv_encoder requires an encoder-mode block")
    return block(x)


def light_conv_decoder(x: Tensor, block: LightConvBlock) -> Tensor:
    if block.mode != "decoder":
        raise ConfigError("light_conv_decoder requires a decoder-mode block")
    return block(x)


def spatial_shift_block(x: Tensor, block: SpatialShiftBlock) -> Tensor:
    return block(x)


def tokenized_shift_block(x: Tensor, block: TokenizedShiftBlock) -> Tensor:
    return block(x)


def overlap_patch_embed(x: Tensor, embed: OverlapPatchEmbed) -> Tensor:
    return embed(x)
