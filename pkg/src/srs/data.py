"""Synthetic weak-target data, on-disk ingestion, splitting, and augmentation.

Directory convention: ``<root>/images/*.png`` and ``<root>/masks/*.png``
with matching stems. Images are 8-bit grayscale or RGB PNGs scaled to
[0,1]; masks are thresholded at 128.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .autodiff import linear_interp_matrix
from .errors import DivisibilityError, EmptyDataset, MissingMask, UnsupportedFormat
from .tensor import Rng


@dataclass
class Sample:
    image: np.ndarray  # (C,H,W) float32 in [0,1]
    mask: Optional[np.ndarray]  # (1,H,W) float32 in {0,1}
    id: str

    def validate(self):
        assert self.image.ndim == 3 and np.isfinite(self.image).all()
        if self.mask is not None:
            assert self.mask.shape == (1,) + self.image.shape[1:]
            assert set(np.unique(self.mask)) <= {0.0, 1.0}


@dataclass
class SplitSpec:
    train_fraction: float = 0.7
    seed: int = 0


def split_7_3(dataset: list[Sample], spec: SplitSpec) -> tuple[list[Sample], list[Sample]]:
    """Seeded disjoint split; train gets floor(train_fraction * n) samples."""
    n = len(dataset)
    if n == 0:
        raise EmptyDataset("cannot split an empty dataset")
    n_train = int(math.floor(spec.train_fraction * n + 1e-9))
    order = Rng(spec.seed).permutation(n)
    train = [dataset[i] for i in order[:n_train]]
    test = [dataset[i] for i in order[n_train:]]
    return train, test


# -- synthetic generation ----------------------------------------------------


def _smooth_noise(rng: Rng, size: int, sigma: float) -> np.ndarray:
    """Gaussian-blurred white noise normalized to unit max amplitude."""
    noise = ndimage.gaussian_filter(rng.normal((size, size), 1.0, dtype=np.float64), sigma)
    peak = np.abs(noise).max()
    return noise / peak if peak > 0 else noise


def _gaussian_bump(size: int, cy: float, cx: float, sy: float, sx: float) -> np.ndarray:
    ys = np.arange(size)[:, None]
    xs = np.arange(size)[None, :]
    return np.exp(-0.5 * (((ys - cy) / sy) ** 2 + ((xs - cx) / sx) ** 2))


def _synth_easy(rng: Rng, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Low-contrast gaussian blobs over textured background; exact FWHM masks."""
    area_total = size * size
    for _ in range(50):
        base = rng.uniform(0.35, 0.55)
        texture = _smooth_noise(rng, size, rng.uniform(2.0, 4.0)) * rng.uniform(0.03, 0.08)
        img = np.full((size, size), base) + texture
        mask = np.zeros((size, size), dtype=bool)
        n_blobs = int(rng.integers(1, 3))
        for _b in range(n_blobs):
            frac = rng.uniform(0.012, 0.08 / n_blobs)
            area = frac * area_total
            # FWHM ellipse area = 2*pi*ln(2) * sx * sy
            aspect = rng.uniform(0.7, 1.4)
            s_prod = area / (2.0 * math.pi * math.log(2.0))
            sy = math.sqrt(s_prod * aspect)
            sx = s_prod / sy
            margin = 3.0 * max(sy, sx)
            cy = rng.uniform(margin, size - margin)
            cx = rng.uniform(margin, size - margin)
            amp = rng.uniform(0.1, 0.3)
            bump = _gaussian_bump(size, cy, cx, sy, sx)
            img += amp * bump
            mask |= bump >= 0.5
        frac = mask.sum() / area_total
        if 0.005 <= frac <= 0.10:
            return np.clip(img, 0.0, 1.0), mask.astype(np.float32)
    raise RuntimeError("easy-mode synthesis failed to hit the target area range")


_POINT_TEMPLATES = [
    [(0, 0)],
    [(0, 0), (0, 1)],
    [(0, 0), (1, 0)],
    [(0, 0), (0, 1), (1, 0), (1, 1)],
    [(0, 0), (0, 1), (0, -1), (1, 0), (-1, 0)],
    [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)],
]


def _synth_hard(rng: Rng, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Tiny point targets (1-9 px) at low local contrast over structured
    clutter with sub-threshold distractor speckles; no global threshold
    separates targets from background."""
    base = rng.uniform(0.25, 0.5)
    clouds = _smooth_noise(rng, size, rng.uniform(5.0, 9.0)) * rng.uniform(0.10, 0.20)
    grain = _smooth_noise(rng, size, rng.uniform(0.7, 1.2)) * rng.uniform(0.03, 0.06)
    img = np.full((size, size), base) + clouds + grain
    # distractor speckles: point-like bumps that stay below target contrast
    for _d in range(int(rng.integers(4, 9))):
        dy = int(rng.integers(1, size - 1))
        dx = int(rng.integers(1, size - 1))
        img[dy, dx] += rng.uniform(0.03, 0.09)
    mask = np.zeros((size, size), dtype=bool)
    n_targets = int(rng.integers(1, 4))
    for _t in range(n_targets):
        template = _POINT_TEMPLATES[int(rng.integers(0, len(_POINT_TEMPLATES)))]
        cy = int(rng.integers(3, size - 3))
        cx = int(rng.integers(3, size - 3))
        amp = rng.uniform(0.12, 0.24)
        for dy, dx in template:
            img[cy + dy, cx + dx] += amp * float(rng.uniform(0.85, 1.0))
            mask[cy + dy, cx + dx] = True
    return np.clip(img, 0.0, 1.0), mask.astype(np.float32)


def synth_weak_targets(n: int, size: int, rng: Rng, difficulty: str = "easy") -> list[Sample]:
    """Generate images with exact binary masks; deterministic under the rng."""
    if size % 8:
        raise DivisibilityError(f"size {size} must be divisible by 8")
    if difficulty not in ("easy", "hard"):
        raise ValueError(f"difficulty must be easy or hard, got {difficulty!r}")
    make = _synth_easy if difficulty == "easy" else _synth_hard
    out = []
    for i in range(n):
        img, mask = make(rng, size)
        out.append(
            Sample(
                image=img[None].astype(np.float32),
                mask=mask[None].astype(np.float32),
                id=f"{difficulty}_{i:05d}",
            )
        )
    return out


# -- resizing ----------------------------------------------------------------


def resize_to(image: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resize of a (C,H,W) image to (C,side,side)."""
    if side <= 0:
        raise ValueError(f"side must be positive, got {side}")
    c, h, w = image.shape
    rm = linear_interp_matrix(side, h, np.float64)
    cm = linear_interp_matrix(side, w, np.float64)
    out = rm @ image.astype(np.float64) @ cm.T
    return out.astype(np.float32)


def resize_mask(mask: np.ndarray, side: int) -> np.ndarray:
    """Nearest-neighbor resize of a (1,H,W) mask, re-binarized."""
    _, h, w = mask.shape
    rows = np.minimum(((np.arange(side) + 0.5) * h / side).astype(int), h - 1)
    cols = np.minimum(((np.arange(side) + 0.5) * w / side).astype(int), w - 1)
    out = mask[:, rows][:, :, cols]
    return (out > 0.5).astype(np.float32)


def resize_sample(sample: Sample, side: int) -> Sample:
    return Sample(
        image=resize_to(sample.image, side),
        mask=None if sample.mask is None else resize_mask(sample.mask, side),
        id=sample.id,
    )


# -- augmentation ------------------------------------------------------------


def apply_dihedral(arr: np.ndarray, rot: int, hflip: bool, vflip: bool) -> np.ndarray:
    """Rotate by rot*90 degrees then apply flips; arr is (C,H,W)."""
    out = np.rot90(arr, rot, axes=(1, 2))
    if hflip:
        out = out[:, :, ::-1]
    if vflip:
        out = out[:, ::-1, :]
    return np.ascontiguousarray(out)


def invert_dihedral(arr: np.ndarray, rot: int, hflip: bool, vflip: bool) -> np.ndarray:
    out = arr
    if vflip:
        out = out[:, ::-1, :]
    if hflip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(np.rot90(out, -rot, axes=(1, 2)))


def draw_dihedral(rng: Rng) -> tuple[int, bool, bool]:
    return int(rng.integers(0, 4)), bool(rng.integers(0, 2)), bool(rng.integers(0, 2))


def augment(sample: Sample, rng: Rng) -> Sample:
    """Random right-angle rotation and flips, applied identically to image and mask."""
    rot, hflip, vflip = draw_dihedral(rng)
    return Sample(
        image=apply_dihedral(sample.image, rot, hflip, vflip),
        mask=None if sample.mask is None else apply_dihedral(sample.mask, rot, hflip, vflip),
        id=sample.id,
    )


# -- PNG ingest/export -------------------------------------------------------


def _load_png_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode == "L":
            arr = np.asarray(im, dtype=np.float32)[None]
        elif im.mode == "RGB":
            arr = np.asarray(im, dtype=np.float32).transpose(2, 0, 1)
        else:
            raise UnsupportedFormat(f"{path.name}: unsupported PNG mode {im.mode!r}")
    return arr / 255.0


def _load_png_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB", "1", "P"):
            raise UnsupportedFormat(f"{path.name}: unsupported mask mode {im.mode!r}")
        arr = np.asarray(im.convert("L"), dtype=np.float32)
    return (arr >= 128).astype(np.float32)[None]


def load_image_dir(images_path, masks_path=None) -> list[Sample]:
    """Load image/mask PNG pairs matched by stem; masks_path=None loads unlabeled."""
    images_dir = Path(images_path)
    files = sorted(images_dir.glob("*.png"))
    if not files:
        raise EmptyDataset(f"no PNG files in {images_dir}")
    masks_dir = Path(masks_path) if masks_path is not None else None
    out = []
    for f in files:
        mask = None
        if masks_dir is not None:
            mask_file = masks_dir / f.name
            if not mask_file.exists():
                raise MissingMask(f"no mask for image {f.name}")
            mask = _load_png_mask(mask_file)
        out.append(Sample(image=_load_png_image(f), mask=mask, id=f.stem))
    return out


def save_dataset(dataset: list[Sample], root) -> None:
    """Write the images/ + masks/ directory layout with 8-bit PNGs."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    has_masks = any(s.mask is not None for s in dataset)
    if has_masks:
        (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in dataset:
        img = np.clip(np.round(s.image * 255.0), 0, 255).astype(np.uint8)
        if img.shape[0] == 1:
            Image.fromarray(img[0], mode="L").save(root / "images" / f"{s.id}.png")
        else:
            Image.fromarray(img.transpose(1, 2, 0), mode="RGB").save(root / "images" / f"{s.id}.png")
        if s.mask is not None:
            m = (s.mask[0] > 0.5).astype(np.uint8) * 255
            Image.fromarray(m, mode="L").save(root / "masks" / f"{s.id}.png")
