"""Calibration sweep for the directional ablation checks.

Not part of the package; explores dataset/epoch settings where the
ablation directions are stable across seeds.
"""

import sys
import time
import warnings

import numpy as np

sys.path.insert(0, "src")
warnings.simplefilter("ignore")

from srs.data import synth_weak_targets
from srs.metrics import evaluate
from srs.model import ModelConfig, SRSModel, build_ablation
from srs.tensor import Rng
from srs.training import TrainConfig, train_phase_one, train_phase_two


def run(
    n_train=120,
    n_test=60,
    size=64,
    widths=(8, 16, 32),
    epochs_recon=15,
    epochs_seg=18,
    seeds=(0, 1, 2),
    difficulty="hard",
    augment=True,
):
    levels = len(widths)
    results = {"pure_seg": [], "dpconv_seg": [], "dpconv_recon": [], "masked_recon": []}
    t_start = time.perf_counter()
    for seed in seeds:
        data_rng = Rng(1234 + seed)
        train = synth_weak_targets(n_train, size, data_rng, difficulty)
        test = synth_weak_targets(n_test, size, Rng(777 + seed), difficulty)
        mcfg = ModelConfig(levels=levels, widths=widths, in_channels=1)
        tcfg = TrainConfig(seed=seed, batch_size=8, augment=augment,
                           epochs_recon=epochs_recon, epochs_seg=epochs_seg)

        t0 = time.perf_counter()
        recon_model = SRSModel(mcfg, seed=seed)
        ck_direct = train_phase_one(recon_model, train, tcfg)

        import dataclasses
        tcfg_masked = dataclasses.replace(tcfg, recon_mode="masked")
        recon_model_m = SRSModel(mcfg, seed=seed)
        ck_masked = train_phase_one(recon_model_m, train, tcfg_masked)
        t1 = time.perf_counter()

        for variant in ("pure_seg", "dpconv_seg", "dpconv_recon"):
            model = build_ablation(variant, mcfg, seed=seed)
            ck = train_phase_two(model, train, ck_direct if variant == "dpconv_recon" else None,
                                 tcfg)
            iou = evaluate(model, test, with_flops=False).mean_iou
            results[variant].append(iou)

        model = build_ablation("dpconv_recon", mcfg, seed=seed)
        train_phase_two(model, train, ck_masked, tcfg)
        results["masked_recon"].append(evaluate(model, test, with_flops=False).mean_iou)
        t2 = time.perf_counter()
        print(f"seed {seed}: recon {t1-t0:.0f}s seg x4 {t2-t1:.0f}s | "
              + " ".join(f"{k}={results[k][-1]:.3f}" for k in results), flush=True)

    print(f"\nconfig: n_train={n_train} size={size} widths={widths} "
          f"er={epochs_recon} es={epochs_seg} aug={augment} difficulty={difficulty}")
    for k, v in results.items():
        print(f"{k:14s} mean={np.mean(v):.4f} vals={[round(x,3) for x in v]}")
    print(f"recon-pure gap: {np.mean(results['dpconv_recon']) - np.mean(results['pure_seg']):+.4f}")
    print(f"recon-seg  gap: {np.mean(results['dpconv_recon']) - np.mean(results['dpconv_seg']):+.4f}")
    print(f"masked-direct gap: {np.mean(results['masked_recon']) - np.mean(results['dpconv_recon']):+.4f}")
    print(f"total {time.perf_counter()-t_start:.0f}s")


if __name__ == "__main__":
    import argparse

    ap = argparse.ArgumentParser()
    ap.add_argument("--n-train", type=int, default=120)
    ap.add_argument("--n-test", type=int, default=60)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--widths", type=str, default="8,16,32")
    ap.add_argument("--epochs-recon", type=int, default=15)
    ap.add_argument("--epochs-seg", type=int, default=18)
    ap.add_argument("--difficulty", type=str, default="hard")
    ap.add_argument("--no-augment", action="store_true")
    ap.add_argument("--seeds", type=str, default="0,1,2")
    a = ap.parse_args()
    run(
        n_train=a.n_train,
        n_test=a.n_test,
        size=a.size,
        widths=tuple(int(w) for w in a.widths.split(",")),
        epochs_recon=a.epochs_recon,
        epochs_seg=a.epochs_seg,
        seeds=tuple(int(s) for s in a.seeds.split(",")),
        difficulty=a.difficulty,
        augment=not a.no_augment,
    )
