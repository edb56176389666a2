"""Per-epoch IoU curves for every ablation wiring across seeds.

One phase-2 run per (seed, variant) with per-epoch validation gives the
whole epoch grid at once; used to pick the acceptance comparison window.
"""

import dataclasses
import sys
import time
import warnings

import numpy as np

sys.path.insert(0, "src")
warnings.simplefilter("ignore")

from srs.data import synth_weak_targets
from srs.model import ModelConfig, build_ablation, SRSModel
from srs.tensor import Rng
from srs.training import TrainConfig, train_phase_one, train_phase_two

N_TRAIN, N_TEST, SIZE = 100, 50, 64
EPOCHS_RECON, EPOCHS_SEG = 12, 30
WIDTHS = (8, 16, 32)
SEEDS = (0, 1, 2)

curves = {}
for seed in SEEDS:
    t0 = time.perf_counter()
    train = synth_weak_targets(N_TRAIN, SIZE, Rng(1234 + seed), "hard")
    test = synth_weak_targets(N_TEST, SIZE, Rng(777 + seed), "hard")
    mcfg = ModelConfig(levels=len(WIDTHS), widths=WIDTHS, in_channels=1)
    tcfg = TrainConfig(seed=seed, batch_size=8, epochs_recon=EPOCHS_RECON, epochs_seg=EPOCHS_SEG)

    ck_direct = train_phase_one(SRSModel(mcfg, seed=seed), train, tcfg)
    ck_masked = train_phase_one(
        SRSModel(mcfg, seed=seed), train, dataclasses.replace(tcfg, recon_mode="masked", mask_patch=8, mask_ratio=0.5)
    )

    runs = {
        "pure_seg": ("pure_seg", None),
        "dpconv_seg": ("dpconv_seg", None),
        "dpconv_recon": ("dpconv_recon", ck_direct),
        "masked_recon": ("dpconv_recon", ck_masked),
    }
    for label, (variant, ck) in runs.items():
        model = build_ablation(variant, mcfg, seed=seed)
        out = train_phase_two(model, train, ck, tcfg, val_dataset=test)
        curve = [float(r["val_iou"]) for r in out.log_rows]
        curves[(label, seed)] = curve
        print(f"seed {seed} {label:13s}: " + " ".join(f"{v:.2f}" for v in curve), flush=True)
    print(f"seed {seed} done in {time.perf_counter()-t0:.0f}s", flush=True)

print("\nmean IoU per epoch across seeds:")
for label in ("pure_seg", "dpconv_seg", "dpconv_recon", "masked_recon"):
    mean_curve = np.mean([curves[(label, s)] for s in SEEDS], axis=0)
    print(f"{label:13s}: " + " ".join(f"{v:.2f}" for v in mean_curve))
