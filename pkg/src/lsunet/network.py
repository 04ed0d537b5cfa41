"""U-shaped network assembly with six supervised output levels.

The encoder runs three light conv stages followed by two tokenized shift
down stages, each halving the spatial dims. The decoder mirrors it with
bilinear 2x upsampling: a 1x1 channel adjust, an additive skip from the
same-resolution encoder feature, then the stage block. A 1x1 head per
level emits class logits, giving outputs at input/2^i for i = 0..5.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import LightConvBlock, PlainConvBlock, TokenizedShiftBlock
from .errors import ConfigError, ShapeError
from .nn import Conv2d, Module, ModuleList
from .tensor import Tensor

NUM_LEVELS = 6


@dataclass
class NetworkConfig:
    in_channels: int = 3
    num_classes: int = 1
    stage_widths: tuple = (16, 32, 128, 160, 256)
    conv_stages: int = 3
    shift_stages: int = 2
    gn_groups: int | None = None
    shift_variant_schedule: str = "AB"
    seed: int = 0
    disable_light_conv: bool = False
    disable_tokenized_shift: bool = False

    def validate(self) -> None:
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.conv_stages + self.shift_stages != len(self.stage_widths):
            raise ConfigError(
                f"stage_widths has {len(self.stage_widths)} entries but "
                f"conv_stages+shift_stages = {self.conv_stages + self.shift_stages}")
        if self.conv_stages + self.shift_stages != NUM_LEVELS - 1:
            raise ConfigError(
                f"supervision expects {NUM_LEVELS - 1} stages total, got "
                f"{self.conv_stages + self.shift_stages}")
        for i, w in enumerate(self.stage_widths):
            if w < 1:
                raise ConfigError(f"stage {i}: width must be positive, got {w}")
        for i in range(self.conv_stages, len(self.stage_widths)):
            if (3 * self.stage_widths[i]) % 12 != 0:
                raise ConfigError(
                    f"stage {i}: shift stage width {self.stage_widths[i]} must expand "
                    f"into 3 parts of 4 shift groups (width divisible by 4)")
        if not self.shift_variant_schedule or any(v not in "AB" for v in self.shift_variant_schedule):
            raise ConfigError(f"shift_variant_schedule must be a non-empty string over 'A'/'B', "
                              f"got {self.shift_variant_schedule!r}")


class LSUNet(Module):
    """The full segmentation network; see the module docstring for layout."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        widths = cfg.stage_widths
        n_stages = len(widths)
        variants = self._variant_cycle(cfg.shift_variant_schedule)

        enc = ModuleList()
        in_c = cfg.in_channels
        for i, w in enumerate(widths):
            if i < cfg.conv_stages:
                if cfg.disable_light_conv:
                    enc.append(PlainConvBlock(in_c, w, "encoder", rng=rng))
                else:
                    enc.append(LightConvBlock(in_c, w, "encoder", cfg.gn_groups, rng=rng))
            else:
                if cfg.disable_tokenized_shift:
                    enc.append(PlainConvBlock(in_c, w, "encoder", rng=rng))
                else:
                    enc.append(TokenizedShiftBlock(in_c, w, downsample=True,
                                                   variant=next(variants),
                                                   gn_groups=cfg.gn_groups, rng=rng))
            in_c = w
        self.enc = enc

        # decoder stage producing level L consumes the level-L+1 feature;
        # its width matches the encoder feature at level L so skips can add
        dec_adjust = ModuleList()
        dec = ModuleList()
        for level in range(n_stages - 1, -1, -1):
            # feature width at level l is widths[l-1]; level 0 reuses widths[0]
            target_w = widths[level - 1] if level >= 1 else widths[0]
            upstream_w = widths[level]
            dec_adjust.append(Conv2d(upstream_w, target_w, 1, rng=rng))
            if level >= cfg.conv_stages:
                if cfg.disable_tokenized_shift:
                    dec.append(PlainConvBlock(target_w, target_w, "decoder", rng=rng))
                else:
                    dec.append(TokenizedShiftBlock(target_w, target_w, downsample=False,
                                                   variant=next(variants),
                                                   gn_groups=cfg.gn_groups, rng=rng))
            else:
                if cfg.disable_light_conv:
                    dec.append(PlainConvBlock(target_w, target_w, "decoder", rng=rng))
                else:
                    dec.append(LightConvBlock(target_w, target_w, "decoder", cfg.gn_groups, rng=rng))
        self.dec_adjust = dec_adjust
        self.dec = dec

        heads = ModuleList()
        head_widths = [widths[0]] + [widths[i] for i in range(n_stages)]
        for level in range(NUM_LEVELS):
            heads.append(Conv2d(head_widths[level], cfg.num_classes, 1, rng=rng))
        self.heads = heads

    @staticmethod
    def _variant_cycle(schedule: str):
        i = 0
        while True:
            yield schedule[i % len(schedule)]
            i += 1

    def forward_multiscale(self, x: Tensor) -> list[Tensor]:
        """Returns logits [l0..l5], level i at input/2^i, each with K channels."""
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected input (n, {self.cfg.in_channels}, h, w), got {x.shape}")
        h, w = x.shape[2], x.shape[3]
        if h % 32 != 0 or w % 32 != 0:
            raise ShapeError(f"input spatial dims must be divisible by 32, got {h}x{w}")
        feats = []
        cur = x
        for stage in self.enc:
            cur = stage(cur)
            feats.append(cur)
        n_stages = len(self.enc)
        logits: list[Tensor | None] = [None] * NUM_LEVELS
        logits[n_stages] = self.heads[n_stages](cur)
        for i, level in enumerate(range(n_stages - 1, -1, -1)):
            cur = self.dec_adjust[i](T.bilinear_upsample2x(cur))
            if level >= 1:
                cur = cur + feats[level - 1]
            cur = self.dec[i](cur)
            logits[level] = self.heads[level](cur)
        return logits  # type: ignore[return-value]

    def forward(self, x: Tensor) -> list[Tensor]:
        return self.forward_multiscale(x)


def build_network(cfg: NetworkConfig) -> LSUNet:
    return LSUNet(cfg)


def forward_multiscale(net: LSUNet, x: Tensor) -> list[Tensor]:
    return net.forward_multiscale(x)


def count_params_flops(net: Module, input_dims: tuple, forward=None) -> tuple[int, int]:
    """Exact parameter count plus an instrumented-FLOP estimate of one
    eval-mode forward pass at ``input_dims``.

    FLOP conventions: convolutions and linear layers count 2 per MAC plus
    one per bias add; norms 7 per element; GELU 8; softmax/sigmoid 5 and 4;
    elementwise arithmetic 1; bilinear 2x upsampling 3 per produced element
    per axis pass.
    """
    params = sum(p.data.size for _, p in net.named_parameters())
    if forward is None:
        forward = net.forward
    was_training = net.training
    net.eval()
    x = Tensor(np.zeros(input_dims, dtype=T.DEFAULT_DTYPE))
    with T.flop_counter() as fc:
        forward(x)
    net.train(was_training)
    return params, fc.total
