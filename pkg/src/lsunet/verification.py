"""Finite-difference suites over the op, block and network scopes."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .blocks import (LightConvBlock, SpatialShiftBlock, SplitAttention,
                     TokenizedShiftBlock, spatial_shift_a, spatial_shift_b)
from .gradcheck import GradCheckReport, check_function, check_module
from .network import LSUNet, NetworkConfig
from .tensor import RunningStats, Tensor


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


def op_suite(seed: int = 0, tol: float = 1e-3) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    reports = []

    def check(name, f, tensors, probes=None):
        reports.append(check_function(f, tensors, tol=tol, max_probes=probes,
                                      seed=seed, name=name))

    x = _rand(rng, 1, 2, 5, 5)
    w = _rand(rng, 3, 2, 3, 3)
    b = _rand(rng, 3)
    check("conv2d(k3,s1,p1)", lambda: T.conv2d(x, w, b, 1, 1).sum(), {"x": x, "w": w, "b": b})

    x2 = _rand(rng, 2, 2, 6, 6)
    w2 = _rand(rng, 4, 2, 3, 3)
    b2 = _rand(rng, 4)
    check("conv2d(k3,s2,p0)", lambda: T.conv2d(x2, w2, b2, 2, 0).sum(), {"x": x2, "w": w2, "b": b2})

    xd = _rand(rng, 1, 3, 5, 5)
    wd = _rand(rng, 3, 1, 3, 3)
    bd = _rand(rng, 3)
    check("depthwise_conv2d(k3,s1,p1)", lambda: T.depthwise_conv2d(xd, wd, bd, 1, 1).sum(),
          {"x": xd, "w": wd, "b": bd})

    xb = _rand(rng, 3, 2, 4, 4)
    gb = _rand(rng, 2)
    bb = _rand(rng, 2)
    stats = RunningStats(2, dtype=np.float64)
    check("batch_norm2d(train)",
          lambda: (T.batch_norm2d(xb, gb, bb, stats, training=True) * 0.5 + 0.1).sum(),
          {"x": xb, "gamma": gb, "beta": bb})

    xg = _rand(rng, 2, 4, 4, 4)
    gg = _rand(rng, 4)
    bg = _rand(rng, 4)
    check("group_norm(groups=2)",
          lambda: (T.group_norm(xg, 2, gg, bg) ** 2).sum(), {"x": xg, "gamma": gg, "beta": bg})

    xe = _rand(rng, 2, 3, 4, 4)
    check("gelu", lambda: T.gelu(xe).sum(), {"x": xe})
    check("sigmoid", lambda: T.sigmoid(xe).mean(), {"x": xe})
    check("bilinear_upsample2x", lambda: (T.bilinear_upsample2x(xe) ** 2).sum(), {"x": xe})

    xl = _rand(rng, 3, 4)
    wl = _rand(rng, 5, 4)
    bl = _rand(rng, 5)
    check("linear", lambda: (T.linear(xl, wl, bl) ** 2).sum(), {"x": xl, "w": wl, "b": bl})

    xs = _rand(rng, 2, 3, 5)
    check("softmax(axis=1)", lambda: (T.softmax(xs, 1) * 0.7 + 0.3).sum(), {"x": xs})

    xt = _rand(rng, 1, 8, 4, 4)
    check("spatial_shift_a", lambda: (spatial_shift_a(xt) ** 2).sum(), {"x": xt})
    check("spatial_shift_b", lambda: (spatial_shift_b(xt) ** 2).sum(), {"x": xt})

    zl = _rand(rng, 2, 3, 4, 4)
    tgt = Tensor((rng.random((2, 3, 4, 4)) > 0.5).astype(np.float64))
    check("bce_with_logits", lambda: T.bce_with_logits(zl, tgt).mean(), {"logits": zl})

    xm = _rand(rng, 2, 3, 4, 4)
    ym = _rand(rng, 2, 3, 4, 4)
    check("mul+div+sum composite",
          lambda: ((xm * ym) / (xm * xm + 2.0)).sum() + xm.mean(), {"x": xm, "y": ym})
    return reports


def block_suite(seed: int = 0, tol: float = 1e-3) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    reports = []

    def scalar_forward(module, x):
        return (module(x) ** 2).sum()

    enc = LightConvBlock(2, 4, "encoder", rng=np.random.default_rng(seed))
    reports.append(check_module(enc, lambda: rng.standard_normal((1, 2, 8, 8)),
                                scalar_forward, tol=tol, seed=seed,
                                name="light_conv_encoder(1,2,8,8)"))

    dec = LightConvBlock(4, 4, "decoder", rng=np.random.default_rng(seed + 1))
    reports.append(check_module(dec, lambda: rng.standard_normal((1, 4, 6, 6)),
                                scalar_forward, tol=tol, seed=seed,
                                name="light_conv_decoder(1,4,6,6)"))

    shift = SpatialShiftBlock(8, "A", rng=np.random.default_rng(seed + 2))
    reports.append(check_module(shift, lambda: rng.standard_normal((1, 8, 4, 4)),
                                scalar_forward, tol=tol, seed=seed,
                                name="spatial_shift_block(1,8,4,4)"))

    down = TokenizedShiftBlock(12, 12, downsample=True, variant="B",
                               rng=np.random.default_rng(seed + 3))
    reports.append(check_module(down, lambda: rng.standard_normal((1, 12, 6, 6)),
                                scalar_forward, tol=tol, seed=seed,
                                name="tokenized_shift_down(1,12,6,6)"))

    up = TokenizedShiftBlock(12, 12, downsample=False, variant="A",
                             rng=np.random.default_rng(seed + 4))
    reports.append(check_module(up, lambda: rng.standard_normal((1, 12, 4, 4)),
                                scalar_forward, tol=tol, seed=seed,
                                name="tokenized_shift_up(1,12,4,4)"))

    attn = SplitAttention(8, rng=np.random.default_rng(seed + 5))

    def attn_forward(module, x):
        parts = [T.narrow(x, 1, 8 * k, 8) for k in range(3)]
        return (module(parts) ** 2).sum()

    reports.append(check_module(attn, lambda: rng.standard_normal((2, 24, 3, 3)),
                                attn_forward, tol=tol, seed=seed,
                                name="split_attention_fuse(2,3x8,3,3)"))
    return reports


def network_suite(seed: int = 0, tol: float = 1e-3) -> list[GradCheckReport]:
    cfg = NetworkConfig(in_channels=3, num_classes=2, stage_widths=(4, 4, 12, 12, 12), seed=seed)
    net = LSUNet(cfg)
    rng = np.random.default_rng(seed + 100)

    def forward(module, x):
        logits = module.forward_multiscale(x)
        total = logits[0].sum()
        for lg in logits[1:]:
            total = total + lg.sum()
        return total

    # step 1e-4: through five stages the loss curvature makes 1e-3 steps
    # truncation-limited (~1e-3 rel err) even though the gradient is exact
    report = check_module(net, lambda: rng.standard_normal((1, 3, 32, 32)),
                          forward, tol=tol, probes_per_tensor=4, seed=seed,
                          step=1e-4, name="full_network(1,3,32,32)[4,4,12,12,12]")
    return [report]
