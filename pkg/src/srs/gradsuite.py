"""Finite-difference verification of every differentiable layer.

Each layer family is checked on many small random configurations in
float64 against central differences. Losses are scalar already; other
layers are reduced through a fixed random projection so the check is not
degenerate under normalization invariances.
"""

from __future__ import annotations

import zlib

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .dpconv import CombinationDynConv, DPConvConfig, GeneratorNet, dpconv_forward
from .layers import BatchNorm2d, Conv2d, ResBlock, adaptive_avg_pool_1
from .tensor import Rng
from .training import loss_recon, loss_recon_masked, loss_seg

F64 = np.float64


def _proj_loss(y: Node, w: np.ndarray) -> Node:
    return ad.sum_all(ad.mul(ad.sigmoid(y), Node(w)))


def _check_conv(rng: Rng) -> float:
    groups = int(rng.integers(1, 3))
    c_in = groups * int(rng.integers(1, 3))
    c_out = groups * int(rng.integers(1, 3))
    k = int(rng.integers(0, 2)) * 2 + 1  # 1 or 3
    stride = int(rng.integers(1, 3))
    pad = (k - 1) // 2 if rng.integers(0, 2) else 0
    ho = int(rng.integers(2, 4))
    h = stride * (ho - 1) + k - 2 * pad
    b = int(rng.integers(1, 3))
    conv = Conv2d(c_in, c_out, k, rng, stride=stride, padding=pad, groups=groups, dtype=F64)
    x0 = rng.normal((b, c_in, h, h), dtype=F64)
    w = rng.normal((b, c_out, ho, ho), dtype=F64)
    probes = [
        lambda: ad.grad_check(lambda x: _proj_loss(conv(x), w), x0),
        lambda: ad.grad_check(
            lambda wt: _proj_loss(ad.conv2d(Node(x0), wt, conv.bias, stride, pad, groups), w),
            conv.weight.value,
        ),
        lambda: ad.grad_check(
            lambda bt: _proj_loss(ad.conv2d(Node(x0), conv.weight, bt, stride, pad, groups), w),
            conv.bias.value,
        ),
    ]
    return probes[int(rng.integers(0, 3))]()


def _check_maxpool(rng: Rng) -> float:
    b, c = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    h = 2 * int(rng.integers(2, 4))
    x0 = rng.normal((b, c, h, h), dtype=F64)
    w = rng.normal((b, c, h // 2, h // 2), dtype=F64)
    return ad.grad_check(lambda x: _proj_loss(ad.maxpool2x2(x), w), x0)


def _check_upsample(rng: Rng) -> float:
    b, c = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    h = int(rng.integers(2, 5))
    x0 = rng.normal((b, c, h, h), dtype=F64)
    w = rng.normal((b, c, 2 * h, 2 * h), dtype=F64)
    return ad.grad_check(lambda x: _proj_loss(ad.upsample_bilinear_2x(x), w), x0)


def _check_pool_to_1(rng: Rng) -> float:
    b, c = int(rng.integers(1, 3)), int(rng.integers(1, 5))
    h = int(rng.integers(1, 5))
    x0 = rng.normal((b, c, h, h), dtype=F64)
    w = rng.normal((b, c, 1, 1), dtype=F64)
    return ad.grad_check(lambda x: _proj_loss(adaptive_avg_pool_1(x), w), x0)


def _check_norm(rng: Rng) -> float:
    b, c = int(rng.integers(2, 4)), int(rng.integers(1, 4))
    h = int(rng.integers(2, 5))
    bn = BatchNorm2d(c, dtype=F64)
    bn.gamma.value[...] = rng.normal((c,), dtype=F64)
    bn.beta.value[...] = rng.normal((c,), dtype=F64)
    bn.train(bool(rng.integers(0, 2)))
    x0 = rng.normal((b, c, h, h), dtype=F64)
    w = rng.normal((b, c, h, h), dtype=F64)
    which = int(rng.integers(0, 3))
    if which == 0:
        return ad.grad_check(lambda x: _proj_loss(bn(x), w), x0)
    probe = bn.gamma if which == 1 else bn.beta

    def f(p):
        return _proj_loss(
            ad.batchnorm2d(
                Node(x0),
                p if which == 1 else bn.gamma,
                p if which == 2 else bn.beta,
                bn.buffers["running_mean"],
                bn.buffers["running_var"],
                bn.momentum,
                bn.eps,
                bn.training,
            ),
            w,
        )

    return ad.grad_check(f, probe.value)


def _check_resblock(rng: Rng) -> float:
    c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    b, h = int(rng.integers(1, 3)), int(rng.integers(3, 5))
    block = ResBlock(c_in, c_out, rng, dtype=F64)
    x0 = rng.normal((b, c_in, h, h), dtype=F64)
    w = rng.normal((b, c_out, h, h), dtype=F64)
    if rng.integers(0, 2):
        return ad.grad_check(lambda x: _proj_loss(block(x), w), x0)

    def f(wt):
        saved = block.conv1.weight
        block.conv1.weight = wt
        try:
            return _proj_loss(block(Node(x0)), w)
        finally:
            block.conv1.weight = saved

    return ad.grad_check(f, block.conv1.weight.value)


def _random_dp_cfg(rng: Rng) -> DPConvConfig:
    c_info = int(rng.integers(2, 6))
    cfg = DPConvConfig(
        c_in=int(rng.integers(1, 4)),
        c_out=int(rng.integers(1, 3)),
        k=int(rng.integers(0, 2)) * 2 + 1,
        c_info=c_info,
        conv_b_groups=1 if rng.integers(0, 2) else None,
    )
    return cfg


def _check_generator(rng: Rng) -> float:
    cfg = _random_dp_cfg(rng)
    gen = GeneratorNet(cfg, rng, dtype=F64)
    b, h = int(rng.integers(1, 3)), int(rng.integers(2, 4))
    f_r0 = rng.normal((b, cfg.c_info, h, h), dtype=F64)
    w = rng.normal((b, cfg.hidden, 1, 1), dtype=F64)
    which = int(rng.integers(0, 3))
    if which == 0:
        return ad.grad_check(lambda f_r: _proj_loss(gen(f_r), w), f_r0)
    conv = gen.conv_a if which == 1 else gen.conv_b

    def f(wt):
        saved = conv.weight
        conv.weight = wt
        try:
            return _proj_loss(gen(Node(f_r0)), w)
        finally:
            conv.weight = saved

    return ad.grad_check(f, conv.weight.value)


def _check_dpconv(rng: Rng) -> float:
    cfg = _random_dp_cfg(rng)
    gen = GeneratorNet(cfg, rng, dtype=F64)
    b, h = int(rng.integers(1, 3)), int(rng.integers(2, 5))
    hr = int(rng.integers(2, 4))
    f_s0 = rng.normal((b, cfg.c_in, h, h), dtype=F64)
    f_r0 = rng.normal((b, cfg.c_info, hr, hr), dtype=F64)
    w = rng.normal((b, cfg.c_out, h, h), dtype=F64)
    if rng.integers(0, 2):
        return ad.grad_check(lambda fs: _proj_loss(dpconv_forward(fs, Node(f_r0), gen), w), f_s0)
    return ad.grad_check(lambda fr: _proj_loss(dpconv_forward(Node(f_s0), fr, gen), w), f_r0)


def _check_combination(rng: Rng) -> float:
    c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 3))
    k = int(rng.integers(0, 2)) * 2 + 1
    n = int(rng.integers(1, 4))
    layer = CombinationDynConv(c_in, c_out, k, n, rng, dtype=F64)
    b, h = int(rng.integers(1, 3)), int(rng.integers(2, 4))
    x0 = rng.normal((b, c_in, h, h), dtype=F64)
    w = rng.normal((b, c_out, h, h), dtype=F64)
    if rng.integers(0, 2):
        return ad.grad_check(lambda x: _proj_loss(layer(x), w), x0)

    def f(bank):
        saved = layer.bank
        layer.bank = bank
        try:
            return _proj_loss(layer(Node(x0)), w)
        finally:
            layer.bank = saved

    return ad.grad_check(f, layer.bank.value)


def _check_loss_recon(rng: Rng) -> float:
    b, c, h = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(2, 5))
    target = rng.normal((b, c, h, h), dtype=F64)
    r0 = rng.normal((b, c, h, h), dtype=F64)
    if rng.integers(0, 2):
        return ad.grad_check(lambda r: loss_recon(r, target), r0)
    mask = (rng.uniform(0, 1, (b, 1, h, h)) > 0.5).astype(F64)
    if mask.sum() == 0:
        mask[0, 0, 0, 0] = 1.0
    return ad.grad_check(lambda r: loss_recon_masked(r, target, mask), r0)


def _check_loss_seg(rng: Rng) -> float:
    b, h = int(rng.integers(1, 3)), int(rng.integers(2, 5))
    target = (rng.uniform(0, 1, (b, 1, h, h)) > 0.5).astype(F64)
    z0 = rng.normal((b, 1, h, h), dtype=F64)
    return ad.grad_check(lambda z: loss_seg(z, target), z0)


LAYER_CHECKS = {
    "conv2d": _check_conv,
    "maxpool2x2": _check_maxpool,
    "upsample_bilinear_2x": _check_upsample,
    "adaptive_avg_pool_1": _check_pool_to_1,
    "batchnorm2d": _check_norm,
    "resblock": _check_resblock,
    "generator_net": _check_generator,
    "dpconv_forward": _check_dpconv,
    "combination_dynconv": _check_combination,
    "loss_recon": _check_loss_recon,
    "loss_seg": _check_loss_seg,
}


def run_gradient_suite(configs_per_layer: int = 20, seed: int = 0) -> dict[str, float]:
    """Max relative gradient error per layer family over random configs."""
    results = {}
    for name, check in LAYER_CHECKS.items():
        worst = 0.0
        for i in range(configs_per_layer):
            rng = Rng(seed * 1_000_000 + zlib.crc32(name.encode()) % 65536 + i)
            worst = max(worst, check(rng))
        results[name] = worst
    return results
