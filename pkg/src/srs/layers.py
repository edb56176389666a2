"""Convolutional layer vocabulary: conv, norm, pooling, upsampling, residual blocks.

Modules hold Parameters (Nodes with requires_grad=True) plus non-learnable
buffers, discovered reflectively for optimizers and checkpoints.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import GroupDivisibility, ShapeMismatch
from .tensor import DEFAULT_DTYPE, Rng


def parameter(value: np.ndarray) -> Node:
    return Node(np.ascontiguousarray(value), requires_grad=True)


class Module:
    """Base class: reflective parameter/buffer discovery and mode switching."""

    def __init__(self):
        self.training = True
        self.buffers: dict[str, np.ndarray] = {}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self):
        for name, attr in vars(self).items():
            if isinstance(attr, Module):
                yield name, attr
            elif isinstance(attr, (list, tuple)):
                for i, item in enumerate(attr):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_params(self, prefix: str = "") -> dict[str, Node]:
        out: dict[str, Node] = {}
        for name, attr in vars(self).items():
            if isinstance(attr, Node):
                out[prefix + name] = attr
        for name, child in self._children():
            out.update(child.named_params(f"{prefix}{name}."))
        return out

    def named_state(self, prefix: str = "") -> dict[str, np.ndarray]:
        """Parameters plus buffers (running statistics), as raw arrays."""
        out: dict[str, np.ndarray] = {}
        for name, attr in vars(self).items():
            if isinstance(attr, Node):
                out[prefix + name] = attr.value
        for name, buf in self.buffers.items():
            out[prefix + name] = buf
        for name, child in self._children():
            out.update(child.named_state(f"{prefix}{name}."))
        return out

    def param_count(self) -> int:
        return sum(p.value.size for p in self.named_params().values())

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.named_params().values():
            p.zero_grad()

    def set_requires_grad(self, flag: bool):
        for p in self.named_params().values():
            p.requires_grad = flag


class Conv2d(Module):
    """2D cross-correlation with groups. Default padding keeps stride-1 size."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        k: int,
        rng: Rng,
        stride: int = 1,
        padding: Optional[int] = None,
        groups: int = 1,
        bias: bool = True,
        zero_init: bool = False,
        init_std: Optional[float] = None,
        dtype=DEFAULT_DTYPE,
    ):
        super().__init__()
        if c_in % groups or c_out % groups:
            raise GroupDivisibility(f"channels ({c_in}->{c_out}) not divisible by groups={groups}")
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding
        self.groups = groups
        fan_in = (c_in // groups) * k * k
        if zero_init:
            w = np.zeros((c_out, c_in // groups, k, k), dtype=dtype)
        else:
            std = np.sqrt(2.0 / fan_in) if init_std is None else init_std
            w = rng.normal((c_out, c_in // groups, k, k), std=std, dtype=dtype)
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(c_out, dtype=dtype)) if bias else None

    def forward(self, x: Node) -> Node:
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class BatchNorm2d(Module):
    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = parameter(np.ones(c, dtype=dtype))
        self.beta = parameter(np.zeros(c, dtype=dtype))
        self.buffers = {
            "running_mean": np.zeros(c, dtype=dtype),
            "running_var": np.ones(c, dtype=dtype),
        }

    def forward(self, x: Node) -> Node:
        return ad.batchnorm2d(
            x,
            self.gamma,
            self.beta,
            self.buffers["running_mean"],
            self.buffers["running_var"],
            self.momentum,
            self.eps,
            self.training,
        )


class ResBlock(Module):
    """Two 3x3 conv+norm stages with a shortcut; spatial size preserved."""

    def __init__(self, c_in: int, c_out: int, rng: Rng, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.conv1 = Conv2d(c_in, c_out, 3, rng, bias=False, dtype=dtype)
        self.bn1 = BatchNorm2d(c_out, dtype=dtype)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, bias=False, dtype=dtype)
        self.bn2 = BatchNorm2d(c_out, dtype=dtype)
        self.shortcut = None if c_in == c_out else Conv2d(c_in, c_out, 1, rng, bias=False, dtype=dtype)

    def forward(self, x: Node) -> Node:
        h = ad.relu(self.bn1(self.conv1(x)))
        h = ad.relu(self.bn2(self.conv2(h)))
        sc = x if self.shortcut is None else self.shortcut(x)
        return ad.add(h, sc)


def downsample(x: Node) -> Node:
    """2x2 max-pool; requires even spatial dims."""
    return ad.maxpool2x2(x)


def upsample_bilinear_2x(x: Node) -> Node:
    return ad.upsample_bilinear_2x(x)


def adaptive_avg_pool_1(x: Node) -> Node:
    """Global spatial mean: (B,C,H,W) -> (B,C,1,1)."""
    if x.value.ndim != 4:
        raise ShapeMismatch(f"expected 4D input, got {x.shape}")
    return ad.mean_axes(x, (2, 3), keepdims=True)


def conv2d_naive(
    xv: np.ndarray,
    wv: np.ndarray,
    bv: Optional[np.ndarray] = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> np.ndarray:
    """Loop-nest reference convolution; the oracle conv2d is tested against."""
    b, c_in, h, w = xv.shape
    c_out, c_in_g, kh, kw = wv.shape
    if c_in % groups or c_out % groups:
        raise GroupDivisibility(f"channels ({c_in}->{c_out}) not divisible by groups={groups}")
    if c_in_g != c_in // groups:
        raise ShapeMismatch(f"weight {wv.shape} inconsistent with C_in={c_in}, groups={groups}")
    num_h = h + 2 * padding - kh
    num_w = w + 2 * padding - kw
    if num_h < 0 or num_w < 0 or num_h % stride or num_w % stride:
        raise ShapeMismatch("conv geometry invalid")
    ho, wo = num_h // stride + 1, num_w // stride + 1
    c_out_g = c_out // groups
    out = np.zeros((b, c_out, ho, wo), dtype=xv.dtype)
    for n in range(b):
        for g in range(groups):
            for oc_g in range(c_out_g):
                oc = g * c_out_g + oc_g
                for ic_g in range(c_in_g):
                    ic = g * c_in_g + ic_g
                    for oy in range(ho):
                        for ox in range(wo):
                            acc = out[n, oc, oy, ox]
                            for ky in range(kh):
                                for kx in range(kw):
                                    iy = oy * stride + ky - padding
                                    ix = ox * stride + kx - padding
                                    if 0 <= iy < h and 0 <= ix < w:
                                        acc += wv[oc, ic_g, ky, kx] * xv[n, ic, iy, ix]
                            out[n, oc, oy, ox] = acc
    if bv is not None:
        out += bv.reshape(1, c_out, 1, 1)
    return out
