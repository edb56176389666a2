"""Siamese reconstruction-segmentation model.

Two structurally identical nested-U networks. The reconstruction branch is
trained first on unlabeled images; its encoder is then frozen and its
deepest feature drives the dynamic-kernel generator that bridges into the
segmentation branch's bottleneck.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .dpconv import DPConvConfig, GeneratorNet, dpconv_apply, generate_kernel
from .errors import CheckpointMismatch, MissingPhaseOneWeights, SpatialDivisibility, UnknownVariant
from .layers import BatchNorm2d, Conv2d, Module, ResBlock, downsample, upsample_bilinear_2x
from .tensor import DEFAULT_DTYPE, Rng

VARIANTS = ("pure_seg", "dpconv_seg", "dpconv_recon")

# fixed seed offsets so sibling components draw identical weights across variants
_SEED_SEG = 0
_SEED_RECON = 1_000_003
_SEED_BRIDGE = 2_000_003


@dataclass
class ModelConfig:
    levels: int = 4
    widths: tuple = (16, 32, 64, 128)
    in_channels: int = 1
    variant: str = "dpconv_recon"
    dpconv: DPConvConfig = field(default_factory=DPConvConfig)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != self.levels:
            raise ValueError(f"{self.levels} levels need {self.levels} widths, got {self.widths}")
        if self.variant not in VARIANTS:
            raise UnknownVariant(f"variant {self.variant!r} not in {VARIANTS}")

    @property
    def spatial_factor(self) -> int:
        return 2 ** (self.levels - 1)

    def to_dict(self) -> dict:
        return {
            "levels": self.levels,
            "widths": list(self.widths),
            "in_channels": self.in_channels,
            "variant": self.variant,
            "dpconv": self.dpconv.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["dpconv"] = DPConvConfig.from_dict(d["dpconv"])
        d["widths"] = tuple(d["widths"])
        return cls(**d)


class EncoderStack(Module):
    """Residual blocks with 2x2 max-pool between levels."""

    def __init__(self, c_in: int, widths: tuple, rng: Rng, dtype=DEFAULT_DTYPE):
        super().__init__()
        blocks = []
        prev = c_in
        for w in widths:
            blocks.append(ResBlock(prev, w, rng, dtype=dtype))
            prev = w
        self.blocks = blocks

    def forward(self, x: Node) -> list[Node]:
        feats = []
        h = x
        for i, block in enumerate(self.blocks):
            if i > 0:
                h = downsample(h)
            h = block(h)
            feats.append(h)
        return feats


class NestedDecoder(Module):
    """Dense-nested grid of residual blocks with upsampled skip inputs.

    Block (i, j) consumes all (i, <j) features at its level plus the
    upsampled (i+1, j-1) feature; the head is a 1x1 conv on (0, L-1).
    """

    def __init__(self, widths: tuple, out_channels: int, rng: Rng, dtype=DEFAULT_DTYPE):
        super().__init__()
        levels = len(widths)
        self.levels = levels
        self.grid_keys: list[tuple[int, int]] = []
        blocks = []
        for j in range(1, levels):
            for i in range(levels - j):
                c_in = widths[i] * j + widths[i + 1]
                blocks.append(ResBlock(c_in, widths[i], rng, dtype=dtype))
                self.grid_keys.append((i, j))
        self.blocks = blocks
        # near-zero head init: tame start under the full-rate schedule while
        # keeping gradient flow to every upstream block from the first pass
        self.head = Conv2d(widths[0], out_channels, 1, rng, bias=True, init_std=0.01, dtype=dtype)

    def forward(self, encoder_feats: list[Node]) -> Node:
        grid: dict[tuple[int, int], Node] = {(i, 0): f for i, f in enumerate(encoder_feats)}
        for (i, j), block in zip(self.grid_keys, self.blocks):
            ins = [grid[(i, jj)] for jj in range(j)]
            ins.append(upsample_bilinear_2x(grid[(i + 1, j - 1)]))
            grid[(i, j)] = block(ad.concat_channels(ins))
        return self.head(grid[(0, self.levels - 1)])


class SRSModel(Module):
    """Reconstruction network, segmentation network, and the dynamic-kernel bridge."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.cfg = cfg
        self.freeze_mask: set[str] = set()
        self.recon_weights_loaded = False

        seg_rng = Rng(seed + _SEED_SEG)
        self.seg_encoder = EncoderStack(cfg.in_channels, cfg.widths, seg_rng, dtype=dtype)
        self.seg_decoder = NestedDecoder(cfg.widths, 1, seg_rng, dtype=dtype)

        self.recon_encoder = None
        self.recon_decoder = None
        if cfg.variant == "dpconv_recon":
            recon_rng = Rng(seed + _SEED_RECON)
            self.recon_encoder = EncoderStack(cfg.in_channels, cfg.widths, recon_rng, dtype=dtype)
            self.recon_decoder = NestedDecoder(cfg.widths, cfg.in_channels, recon_rng, dtype=dtype)

        self.generator = None
        self.proj_info = None
        self.proj_in = None
        self.proj_out = None
        self.bridge_norm = None
        if cfg.variant != "pure_seg":
            bridge_rng = Rng(seed + _SEED_BRIDGE)
            dp = cfg.dpconv
            w_deep = cfg.widths[-1]
            self.generator = GeneratorNet(dp, bridge_rng, dtype=dtype)
            self.proj_info = Conv2d(w_deep, dp.c_info, 1, bridge_rng, bias=True, dtype=dtype)
            self.proj_in = Conv2d(w_deep, dp.c_in, 1, bridge_rng, bias=True, dtype=dtype)
            # normalizing the dynamic-conv response keeps the bridge scale
            # bounded regardless of the frozen encoder's activation range
            self.bridge_norm = BatchNorm2d(dp.c_out, dtype=dtype)
            # zero init keeps the bridge silent at step 0 (pure-seg behavior)
            self.proj_out = Conv2d(dp.c_out, w_deep, 1, bridge_rng, bias=False, zero_init=True, dtype=dtype)

    @property
    def variant(self) -> str:
        return self.cfg.variant

    def _check_spatial(self, image: Node):
        h, w = image.value.shape[2:]
        f = self.cfg.spatial_factor
        if h % f or w % f:
            raise SpatialDivisibility(f"spatial dims {h}x{w} must be divisible by {f}")

    def recon_forward(self, image: Node) -> tuple[Node, Node]:
        """Reconstruct the input; also return the deepest encoder feature."""
        if self.recon_encoder is None or self.recon_decoder is None:
            raise UnknownVariant(f"variant {self.variant!r} has no reconstruction network")
        self._check_spatial(image)
        feats = self.recon_encoder(image)
        return self.recon_decoder(feats), feats[-1]

    def seg_forward(self, image: Node) -> tuple[Node, dict]:
        """Segmentation logits (B,1,H,W) plus internal probe features."""
        self._check_spatial(image)
        feats = self.seg_encoder(image)
        f_s = feats[-1]
        probe: dict = {"f_s": f_s}
        if self.variant == "pure_seg":
            bottleneck = f_s
        else:
            if self.variant == "dpconv_recon":
                if not self.recon_weights_loaded:
                    warnings.warn(
                        "reconstruction encoder has no phase-one weights loaded",
                        MissingPhaseOneWeights,
                    )
                f_r = self.recon_encoder(image)[-1]
            else:  # dpconv_seg: generator fed from the segmentation branch
                f_r = f_s
            kernel = generate_kernel(self.proj_info(f_r), self.generator)
            d = dpconv_apply(self.proj_in(f_s), kernel)
            bridge_out = self.proj_out(self.bridge_norm(d))
            bottleneck = ad.add(f_s, bridge_out)
            probe.update(f_r=f_r, kernel=kernel, bridge=bridge_out)
        logits = self.seg_decoder(feats[:-1] + [bottleneck])
        return logits, probe

    def drop_recon_decoder(self):
        """Phase two does not use the reconstruction decoder; remove it."""
        self.recon_decoder = None

    def train(self, mode: bool = True):
        super().train(mode)
        if self.freeze_mask and self.recon_encoder is not None:
            self.recon_encoder.train(False)
        return self

    def load_state(self, tensors: dict[str, np.ndarray], prefix: str = "") -> None:
        """Copy matching tensors in place; every model entry must be present."""
        state = self.named_state()
        for name, arr in state.items():
            if not name.startswith(prefix):
                continue
            if name not in tensors:
                raise CheckpointMismatch(f"checkpoint is missing tensor {name!r}")
            src = tensors[name]
            if tuple(src.shape) != tuple(arr.shape):
                raise CheckpointMismatch(
                    f"tensor {name!r} has shape {src.shape}, model expects {arr.shape}"
                )
            arr[...] = src


def freeze_reconstruction_encoder(model: SRSModel) -> None:
    """Exclude all reconstruction-encoder parameters (incl. norm scale/shift)
    from optimization and pin its normalization layers to inference mode."""
    if model.recon_encoder is None:
        return
    names = model.recon_encoder.named_params("recon_encoder.")
    model.freeze_mask = set(names)
    model.recon_encoder.set_requires_grad(False)
    model.recon_encoder.train(False)


def unfreeze_reconstruction_encoder(model: SRSModel) -> None:
    if model.recon_encoder is None:
        return
    model.freeze_mask = set()
    model.recon_encoder.set_requires_grad(True)
    model.recon_encoder.train(model.training)


def build_ablation(variant: str, cfg: Optional[ModelConfig] = None, seed: int = 0) -> SRSModel:
    """Construct one of the ablation wirings on a shared base configuration."""
    if variant not in VARIANTS:
        raise UnknownVariant(f"variant {variant!r} not in {VARIANTS}")
    base = cfg.to_dict() if cfg is not None else ModelConfig().to_dict()
    base["variant"] = variant
    return SRSModel(ModelConfig.from_dict(base), seed=seed)
