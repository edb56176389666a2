"""Dynamic-parameter convolution: a compact generator network emits one
convolution kernel per batch sample, applied via a groups-per-batch conv.

Also provides the classic linear-combination dynamic convolution (a bank of
fixed kernels mixed by input-dependent softmax coefficients) as a baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import BatchKernelMismatch, ShapeMismatch
from .layers import Conv2d, Module, adaptive_avg_pool_1
from .tensor import DEFAULT_DTYPE, Rng


@dataclass
class DPConvConfig:
    c_in: int = 8
    c_out: int = 1
    k: int = 1
    c_info: int = 64
    conv_b_groups: Optional[int] = None  # None: gcd(c_info, hidden)
    conv_b_bias: bool = False

    def __post_init__(self):
        if min(self.c_in, self.c_out, self.k, self.c_info) < 1:
            raise ValueError(f"degenerate config: {self}")

    @property
    def hidden(self) -> int:
        """Generated parameters per sample: c_in * c_out * k^2."""
        return self.c_in * self.c_out * self.k * self.k

    def resolved_groups(self) -> int:
        if self.conv_b_groups is not None:
            return self.conv_b_groups
        return math.gcd(self.c_info, self.hidden) or 1

    def to_dict(self) -> dict:
        return {
            "c_in": self.c_in,
            "c_out": self.c_out,
            "k": self.k,
            "c_info": self.c_info,
            "conv_b_groups": self.conv_b_groups,
            "conv_b_bias": self.conv_b_bias,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DPConvConfig":
        return cls(**d)


class GeneratorNet(Module):
    """Kernel generator: 1x1 conv, global average pool, grouped 1x1 conv.

    On input (B, c_info, H', W') the output is (B, hidden, 1, 1) with
    hidden = c_in * c_out * k^2.
    """

    def __init__(self, cfg: DPConvConfig, rng: Rng, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.cfg = cfg
        groups = cfg.resolved_groups()
        self.conv_a = Conv2d(cfg.c_info, cfg.c_info, 1, rng, bias=True, dtype=dtype)
        self.conv_b = Conv2d(
            cfg.c_info, cfg.hidden, 1, rng, groups=groups, bias=cfg.conv_b_bias, dtype=dtype
        )

    def forward(self, f_r: Node) -> Node:
        if f_r.value.ndim != 4 or f_r.value.shape[1] != self.cfg.c_info:
            raise ShapeMismatch(
                f"generator expects (B, {self.cfg.c_info}, H, W), got {f_r.shape}"
            )
        return self.conv_b(adaptive_avg_pool_1(self.conv_a(f_r)))


def count_params(g: GeneratorNet) -> int:
    """Exact learnable-parameter count of the generator."""
    return g.param_count()


def generate_kernel(f_r: Node, g: GeneratorNet) -> Node:
    """Emit per-sample kernels shaped (B*c_out, c_in, k, k).

    The kernel block for sample b occupies rows [b*c_out, (b+1)*c_out).
    """
    cfg = g.cfg
    theta = g(f_r)
    b = f_r.value.shape[0]
    return ad.reshape(theta, (b * cfg.c_out, cfg.c_in, cfg.k, cfg.k))


def dpconv_apply(f_s: Node, kernel: Node) -> Node:
    """Convolve each sample with its own kernel via a groups=B convolution."""
    if f_s.value.ndim != 4 or kernel.value.ndim != 4:
        raise ShapeMismatch(f"expected 4D tensors, got {f_s.shape} and {kernel.shape}")
    b, c_in, h, w = f_s.value.shape
    bk, kc_in, kh, kw = kernel.value.shape
    if kc_in != c_in:
        raise ShapeMismatch(f"kernel expects {kc_in} input channels, features have {c_in}")
    if bk % b:
        raise BatchKernelMismatch(f"kernel rows {bk} not a multiple of batch {b}")
    c_out = bk // b
    x = ad.reshape(f_s, (1, b * c_in, h, w))
    out = ad.conv2d(x, kernel, None, stride=1, padding=(kh - 1) // 2, groups=b)
    return ad.reshape(out, (b, c_out, out.value.shape[2], out.value.shape[3]))


def dpconv_forward(f_s: Node, f_r: Node, g: GeneratorNet) -> Node:
    """Full dynamic-parameter convolution: generate kernels from f_r, apply to f_s."""
    return dpconv_apply(f_s, generate_kernel(f_r, g))


class CombinationDynConv(Module):
    """Classic dynamic convolution: softmax-mixed bank of fixed kernels.

    Coefficients come from global-pool -> 1x1 conv -> softmax, so they sum
    to one per sample; with a single kernel the layer reduces to a standard
    convolution.
    """

    def __init__(
        self,
        c_in: int,
        c_out: int,
        k: int,
        n_kernels: int,
        rng: Rng,
        dtype=DEFAULT_DTYPE,
    ):
        super().__init__()
        if n_kernels < 1:
            raise ValueError(f"need at least one kernel, got {n_kernels}")
        self.n_kernels = n_kernels
        fan_in = c_in * k * k
        self.bank = Node(
            rng.normal((n_kernels, c_out, c_in, k, k), std=np.sqrt(2.0 / fan_in), dtype=dtype),
            requires_grad=True,
        )
        self.att = Conv2d(c_in, n_kernels, 1, rng, bias=True, dtype=dtype)

    def coefficients(self, x: Node) -> Node:
        logits = self.att(adaptive_avg_pool_1(x))
        return ad.softmax_channels(ad.reshape(logits, (x.value.shape[0], self.n_kernels)))

    def forward(self, x: Node) -> Node:
        alpha = self.coefficients(x)
        mixed = ad.mix_kernels(alpha, self.bank)
        return dpconv_apply(x, mixed)


def combination_dynconv_forward(x: Node, layer: CombinationDynConv) -> Node:
    return layer(x)
