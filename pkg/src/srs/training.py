"""Losses, SGD with momentum, the polynomial epoch schedule, masked
reconstruction, and the two-phase training orchestration.

Phase one trains the reconstruction network on unlabeled images (directly
or with masked patches). Phase two loads the reconstruction encoder,
optionally freezes it, and trains the segmentation branch plus the
dynamic-kernel bridge.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import metrics as metrics_mod
from .autodiff import Node
from .checkpoint import FORMAT_VERSION, Checkpoint
from .data import Sample, apply_dihedral, draw_dihedral
from .errors import (
    CheckpointMismatch,
    DivisibilityError,
    EmptyDataset,
    EpochOutOfRange,
    NonBinaryTarget,
    ShapeMismatch,
)
from .model import SRSModel, freeze_reconstruction_encoder, unfreeze_reconstruction_encoder
from .tensor import Rng

DICE_EPS = 1e-5

LOG_FIELDS = ["epoch", "lr", "train_loss", "val_iou", "val_f1", "val_dice", "wall_seconds"]


@dataclass
class TrainConfig:
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs_recon: int = 100
    epochs_seg: int = 300
    seed: int = 0
    recon_mode: str = "direct"  # "direct" or "masked"
    freeze: bool = True
    augment: bool = True
    mask_patch: int = 16
    mask_ratio: float = 0.6

    def to_dict(self) -> dict:
        return asdict(self)


def _target_array(target) -> np.ndarray:
    return target.value if isinstance(target, Node) else np.asarray(target)


def loss_recon(recon: Node, target) -> Node:
    """Half the mean squared error: per-sample pixel means averaged over the
    batch, halved. All samples share a pixel count, so this equals
    0.5 * mean((recon - target)^2)."""
    t = _target_array(target)
    if recon.value.shape != t.shape:
        raise ShapeMismatch(f"recon {recon.shape} vs target {t.shape}")
    d = ad.sub(recon, Node(t.astype(recon.value.dtype)))
    return ad.mul(ad.mean_all(ad.mul(d, d)), 0.5)


def loss_recon_masked(recon: Node, target, mask: np.ndarray) -> Node:
    """Same loss restricted to masked pixels (mask: (B,1,H,W), 1 = masked)."""
    t = _target_array(target)
    if recon.value.shape != t.shape:
        raise ShapeMismatch(f"recon {recon.shape} vs target {t.shape}")
    w = np.broadcast_to(mask, recon.value.shape).astype(recon.value.dtype)
    total = float(w.sum())
    if total == 0:
        raise ValueError("mask selects no pixels")
    d = ad.sub(recon, Node(t.astype(recon.value.dtype)))
    weighted = ad.mul(ad.mul(d, d), Node(np.ascontiguousarray(w)))
    return ad.mul(ad.sum_all(weighted), 0.5 / total)


def loss_seg(logits: Node, target) -> Node:
    """0.5 * BCE(sigmoid(logits), target) + DiceLoss(sigmoid(logits), target)."""
    t = _target_array(target).astype(logits.value.dtype)
    if logits.value.shape != t.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs target {t.shape}")
    uniq = np.unique(t)
    if not set(float(u) for u in uniq) <= {0.0, 1.0}:
        raise NonBinaryTarget(f"target values {uniq[:8]} are not binary")
    bce = ad.bce_with_logits_mean(logits, t)
    p = ad.sigmoid(logits)
    inter = ad.sum_all(ad.mul(p, Node(np.ascontiguousarray(t))))
    psum = ad.sum_all(p)
    ssum = float(t.sum())
    dice_coeff = ad.div(ad.add(ad.mul(inter, 2.0), DICE_EPS), ad.add(psum, ssum + DICE_EPS))
    dice_loss = ad.sub(1.0, dice_coeff)
    return ad.add(ad.mul(bce, 0.5), dice_loss)


def lr_at(epoch: int, cfg: TrainConfig, max_epoch: int) -> float:
    """Polynomial decay lr0 * (1 - epoch/max_epoch)^0.9, applied per epoch."""
    if not 0 <= epoch <= max_epoch:
        raise EpochOutOfRange(f"epoch {epoch} outside [0, {max_epoch}]")
    return cfg.lr0 * (1.0 - epoch / max_epoch) ** 0.9


class SGD:
    """Momentum SGD with coupled L2 weight decay.

    v <- momentum*v + (g + wd*theta); theta <- theta - lr*v.
    Frozen or requires_grad=False parameters are never touched.
    """

    def __init__(
        self,
        params: dict[str, Node],
        momentum: float = 0.9,
        weight_decay: float = 1e-4,
        frozen: Optional[set] = None,
    ):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.frozen = set(frozen or ())
        self.velocity = {
            name: np.zeros_like(p.value)
            for name, p in params.items()
            if name not in self.frozen
        }

    def _active(self):
        for name, p in self.params.items():
            if name in self.frozen or not p.requires_grad:
                continue
            yield name, p

    def step(self, lr: float) -> None:
        for name, p in self._active():
            if p.grad.shape != p.value.shape:
                raise ShapeMismatch(f"gradient shape mismatch for {name}")
            g = p.grad + self.weight_decay * p.value
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.value -= (lr * v).astype(p.value.dtype)

    def zero_grad(self) -> None:
        for _, p in self._active():
            p.zero_grad()

    def state_tensors(self, prefix: str = "opt/") -> dict[str, np.ndarray]:
        return {prefix + name: v for name, v in self.velocity.items()}

    def load_state_tensors(self, tensors: dict[str, np.ndarray], prefix: str = "opt/") -> None:
        for name, v in self.velocity.items():
            key = prefix + name
            if key in tensors:
                v[...] = tensors[key]


def sgd_step(params: dict[str, Node], opt: SGD, lr: float) -> None:
    del params
    opt.step(lr)


def masked_reconstruction_batch(
    images: np.ndarray, rng: Rng, patch: int = 16, ratio: float = 0.6
) -> tuple[np.ndarray, np.ndarray]:
    """Zero a fraction of non-overlapping patch tiles per image.

    Returns (masked_images, mask) with mask (B,1,H,W), 1 where zeroed; the
    reconstruction loss is restricted to the masked region.
    """
    b, _, h, w = images.shape
    if h % patch or w % patch:
        raise DivisibilityError(f"spatial dims {h}x{w} not divisible by patch {patch}")
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must be in (0,1), got {ratio}")
    th, tw = h // patch, w // patch
    tiles = th * tw
    n_masked = int(round(ratio * tiles))
    mask = np.zeros((b, 1, h, w), dtype=images.dtype)
    for i in range(b):
        chosen = rng.choice(tiles, n_masked, replace=False)
        for t in chosen:
            ty, tx = divmod(int(t), tw)
            mask[i, 0, ty * patch : (ty + 1) * patch, tx * patch : (tx + 1) * patch] = 1.0
    return images * (1.0 - mask), mask


def write_metrics_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _batch_indices(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def _collect_batch(dataset: list[Sample], idx, rng: Rng, augment: bool, with_masks: bool):
    images, masks = [], []
    for i in idx:
        s = dataset[int(i)]
        img, msk = s.image, s.mask
        if augment:
            rot, hf, vf = draw_dihedral(rng)
            img = apply_dihedral(img, rot, hf, vf)
            if msk is not None:
                msk = apply_dihedral(msk, rot, hf, vf)
        images.append(img)
        if with_masks:
            masks.append(msk)
    x = np.stack(images)
    y = np.stack(masks) if with_masks else None
    return x, y


def _model_checkpoint(model: SRSModel, opt: SGD, cfg: TrainConfig, phase: str,
                      epoch: int, rng: Rng, tensor_prefix: str = "") -> Checkpoint:
    tensors: dict[str, np.ndarray] = {}
    for name, arr in model.named_state().items():
        if name.startswith(tensor_prefix):
            tensors[name] = arr.copy()
    tensors.update({k: v.copy() for k, v in opt.state_tensors().items()})
    config = {
        "format_version": FORMAT_VERSION,
        "phase": phase,
        "model": model.cfg.to_dict(),
        "epoch": epoch,
        "rng_state": rng.state(),
        "train_config": cfg.to_dict(),
    }
    return Checkpoint(config=config, tensors=tensors)


def train_phase_one(
    model: SRSModel,
    dataset: list[Sample],
    cfg: TrainConfig,
    log_path=None,
    epochs: Optional[int] = None,
) -> Checkpoint:
    """Train the reconstruction network; deterministic under cfg.seed."""
    if not dataset:
        raise EmptyDataset("phase one needs a non-empty dataset")
    epochs = cfg.epochs_recon if epochs is None else epochs
    rng = Rng(cfg.seed)
    model.train()
    params = {k: v for k, v in model.named_params().items() if k.startswith("recon_")}
    opt = SGD(params, cfg.momentum, cfg.weight_decay)
    rows = []
    for epoch in range(epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg, epochs)
        losses = []
        for idx in _batch_indices(rng.permutation(len(dataset)), cfg.batch_size):
            x, _ = _collect_batch(dataset, idx, rng, cfg.augment, with_masks=False)
            if cfg.recon_mode == "masked":
                masked_x, mask = masked_reconstruction_batch(x, rng, cfg.mask_patch, cfg.mask_ratio)
                recon, _ = model.recon_forward(Node(masked_x))
                loss = loss_recon_masked(recon, x, mask)
            else:
                recon, _ = model.recon_forward(Node(x))
                loss = loss_recon(recon, x)
            model.zero_grad()
            ad.backward(loss)
            opt.step(lr)
            losses.append(loss.item())
        rows.append(
            {
                "epoch": epoch,
                "lr": f"{lr:.8f}",
                "train_loss": f"{float(np.mean(losses)):.8f}",
                "val_iou": "",
                "val_f1": "",
                "val_dice": "",
                "wall_seconds": f"{time.perf_counter() - t0:.3f}",
            }
        )
    if log_path is not None:
        write_metrics_csv(rows, log_path)
    ckpt = _model_checkpoint(model, opt, cfg, "recon", epochs, rng, tensor_prefix="recon_")
    ckpt.log_rows = rows  # in-memory only, not serialized
    return ckpt


def _check_phase1_compat(model: SRSModel, ckpt: Checkpoint) -> None:
    mc = ckpt.config.get("model", {})
    ours = model.cfg.to_dict()
    for key in ("levels", "widths", "in_channels"):
        if mc.get(key) != ours[key]:
            raise CheckpointMismatch(
                f"phase-one checkpoint {key}={mc.get(key)} incompatible with model {key}={ours[key]}"
            )


def train_phase_two(
    model: SRSModel,
    dataset: list[Sample],
    phase1_ckpt: Optional[Checkpoint],
    cfg: TrainConfig,
    val_dataset: Optional[list[Sample]] = None,
    log_path=None,
    epochs: Optional[int] = None,
) -> Checkpoint:
    """Train the segmentation branch and bridge; the reconstruction encoder
    is loaded from the phase-one checkpoint and frozen when cfg.freeze."""
    if not dataset:
        raise EmptyDataset("phase two needs a non-empty dataset")
    epochs = cfg.epochs_seg if epochs is None else epochs
    if model.variant == "dpconv_recon":
        if phase1_ckpt is not None:
            _check_phase1_compat(model, phase1_ckpt)
            model.load_state(phase1_ckpt.tensors, prefix="recon_encoder.")
            model.recon_weights_loaded = True
        model.drop_recon_decoder()
        if cfg.freeze:
            freeze_reconstruction_encoder(model)
        else:
            unfreeze_reconstruction_encoder(model)
    rng = Rng(cfg.seed)
    model.train()
    opt = SGD(model.named_params(), cfg.momentum, cfg.weight_decay, frozen=model.freeze_mask)
    rows = []
    for epoch in range(epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg, epochs)
        losses = []
        for idx in _batch_indices(rng.permutation(len(dataset)), cfg.batch_size):
            x, y = _collect_batch(dataset, idx, rng, cfg.augment, with_masks=True)
            logits, _ = model.seg_forward(Node(x))
            loss = loss_seg(logits, y)
            model.zero_grad()
            ad.backward(loss)
            opt.step(lr)
            losses.append(loss.item())
        row = {
            "epoch": epoch,
            "lr": f"{lr:.8f}",
            "train_loss": f"{float(np.mean(losses)):.8f}",
            "val_iou": "",
            "val_f1": "",
            "val_dice": "",
            "wall_seconds": f"{time.perf_counter() - t0:.3f}",
        }
        if val_dataset:
            report = metrics_mod.evaluate(model, val_dataset, with_flops=False)
            row["val_iou"] = f"{report.mean_iou:.6f}"
            row["val_f1"] = f"{report.mean_f1:.6f}"
            row["val_dice"] = f"{report.mean_dice:.6f}"
            model.train()
        rows.append(row)
    if log_path is not None:
        write_metrics_csv(rows, log_path)
    ckpt = _model_checkpoint(model, opt, cfg, "seg", epochs, rng)
    ckpt.log_rows = rows  # in-memory only, not serialized
    return ckpt
