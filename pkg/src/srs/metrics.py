"""Segmentation metrics, resource accounting, and evaluation reports.

Conventions (the inputs are binary masks):
  - IoU and F1/Dice of two empty masks are 1.0.
  - HD95 of two empty masks is 0; if exactly one mask is empty the image
    diagonal length sqrt(H^2 + W^2) is reported as a penalty.
  - Boundary pixels are positive pixels with at least one background
    4-neighbor (pixels outside the image count as background).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Node
from .errors import EmptyDataset, ShapeMismatch


def _as_bool_mask(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim == 3 and m.shape[0] == 1:
        m = m[0]
    if m.ndim != 2:
        raise ShapeMismatch(f"expected a 2D mask, got shape {m.shape}")
    return m > 0.5


def _check_pair(pred: np.ndarray, gt: np.ndarray):
    p, g = _as_bool_mask(pred), _as_bool_mask(gt)
    if p.shape != g.shape:
        raise ShapeMismatch(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    p, g = _check_pair(pred, gt)
    union = int(np.logical_or(p, g).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(p, g).sum()) / union


def f1_dice(pred: np.ndarray, gt: np.ndarray) -> float:
    p, g = _check_pair(pred, gt)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Boolean map of positive pixels with >= 1 background 4-neighbor."""
    m = _as_bool_mask(mask)
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return m & ~interior


def hd95(pred: np.ndarray, gt: np.ndarray) -> float:
    """95th percentile (linear interpolation) of pooled directed
    boundary-to-boundary Euclidean distances."""
    p, g = _check_pair(pred, gt)
    p_any, g_any = bool(p.any()), bool(g.any())
    if not p_any and not g_any:
        return 0.0
    if p_any != g_any:
        h, w = p.shape
        return float(np.hypot(h, w))
    bp = boundary_pixels(p)
    bg = boundary_pixels(g)
    dist_to_g = ndimage.distance_transform_edt(~bg)
    dist_to_p = ndimage.distance_transform_edt(~bp)
    pooled = np.concatenate([dist_to_g[bp], dist_to_p[bg]])
    return float(np.percentile(pooled, 95))


@dataclass
class MetricsReport:
    per_image: list[dict] = field(default_factory=list)
    mean_iou: float = 0.0
    mean_f1: float = 0.0
    mean_dice: float = 0.0
    mean_hd95: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0
    params: int = 0
    flops: int = 0

    def to_dict(self) -> dict:
        return {
            "mean": {
                "iou": self.mean_iou,
                "f1": self.mean_f1,
                "dice": self.mean_dice,
                "hd95": self.mean_hd95,
            },
            "counts": {"tp": self.tp, "fp": self.fp, "fn": self.fn},
            "model": {"params": self.params, "flops": self.flops},
            "per_image": self.per_image,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_csv(self, path) -> None:
        fields = ["id", "iou", "f1", "dice", "hd95", "tp", "fp", "fn"]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            for row in self.per_image:
                writer.writerow({k: row[k] for k in fields})
            writer.writerow(
                {
                    "id": "mean",
                    "iou": self.mean_iou,
                    "f1": self.mean_f1,
                    "dice": self.mean_dice,
                    "hd95": self.mean_hd95,
                    "tp": self.tp,
                    "fp": self.fp,
                    "fn": self.fn,
                }
            )


def count_model_params(model) -> int:
    return model.param_count()


def count_flops(model, input_shape) -> int:
    """Per-sample forward cost of the segmentation path at the given (C,H,W).

    Convs cost 2*H'*W'*C_out*(C_in/groups)*K^2 plus H'*W'*C_out when biased;
    normalization 2/element, ReLU 1, sigmoid 4, 2x2 max-pool 3/output
    element, bilinear upsample 8/output element, elementwise add/mul
    1/element.
    """
    c, h, w = input_shape
    x = Node(np.zeros((1, c, h, w), dtype=np.float32))
    was_training = model.training
    model.eval()
    try:
        with ad.no_grad(), ad.flop_scope() as counter:
            model.seg_forward(x)
    finally:
        model.train(was_training)
    return counter.total


def count_forward_flops(forward_fn, input_shape) -> int:
    """Cost of an arbitrary single-sample forward callable."""
    c, h, w = input_shape
    x = Node(np.zeros((1, c, h, w), dtype=np.float32))
    with ad.no_grad(), ad.flop_scope() as counter:
        forward_fn(x)
    return counter.total


def predict_masks(model, images: np.ndarray, threshold: float = 0.5, batch_size: int = 8):
    """Probabilities and thresholded masks for a stack of images (N,C,H,W)."""
    was_training = model.training
    model.eval()
    probs = []
    try:
        with ad.no_grad():
            for start in range(0, images.shape[0], batch_size):
                chunk = images[start : start + batch_size]
                logits, _ = model.seg_forward(Node(chunk))
                probs.append(ad.sigmoid(logits).value)
    finally:
        model.train(was_training)
    prob = np.concatenate(probs, axis=0)
    return prob, prob > threshold


def evaluate(model, test_set, threshold: float = 0.5, with_flops: bool = True) -> MetricsReport:
    """Per-image and mean metrics of a model on a labeled dataset."""
    if not test_set:
        raise EmptyDataset("evaluation needs a non-empty dataset")
    images = np.stack([s.image for s in test_set])
    _, preds = predict_masks(model, images, threshold)
    report = MetricsReport()
    for sample, pred in zip(test_set, preds):
        gt = _as_bool_mask(sample.mask)
        pm = _as_bool_mask(pred)
        row = {
            "id": sample.id,
            "iou": iou(pm, gt),
            "f1": f1_dice(pm, gt),
            "dice": f1_dice(pm, gt),
            "hd95": hd95(pm, gt),
            "tp": int(np.logical_and(pm, gt).sum()),
            "fp": int(np.logical_and(pm, ~gt).sum()),
            "fn": int(np.logical_and(~pm, gt).sum()),
        }
        report.per_image.append(row)
    n = len(report.per_image)
    report.mean_iou = sum(r["iou"] for r in report.per_image) / n
    report.mean_f1 = sum(r["f1"] for r in report.per_image) / n
    report.mean_dice = sum(r["dice"] for r in report.per_image) / n
    report.mean_hd95 = sum(r["hd95"] for r in report.per_image) / n
    report.tp = sum(r["tp"] for r in report.per_image)
    report.fp = sum(r["fp"] for r in report.per_image)
    report.fn = sum(r["fn"] for r in report.per_image)
    report.params = count_model_params(model)
    if with_flops:
        report.flops = count_flops(model, test_set[0].image.shape)
    return report
