"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s`. The desk-scale runs use
small channel widths (the level count and widths are configurable model
parameters); every tolerance is asserted exactly as stated.
"""

import dataclasses
import time
import warnings

import numpy as np
import pytest

from srs import autodiff as ad
from srs.autodiff import Node
from srs.checkpoint import load_checkpoint, save_checkpoint
from srs.data import Sample, synth_weak_targets
from srs.dpconv import CombinationDynConv, DPConvConfig, GeneratorNet, dpconv_forward
from srs.errors import ChecksumMismatch
from srs.gradsuite import run_gradient_suite
from srs.layers import conv2d_naive
from srs.metrics import evaluate, f1_dice, hd95, iou
from srs.model import ModelConfig, SRSModel, build_ablation
from srs.tensor import Rng
from srs.training import TrainConfig, lr_at, train_phase_one, train_phase_two

warnings.filterwarnings("ignore", category=UserWarning)


def report(criterion: int, passed: bool, detail: str):
    print(f"\ncriterion {criterion:2d} [{'PASS' if passed else 'FAIL'}]: {detail}")
    assert passed, f"criterion {criterion}: {detail}"


# -- criterion 1: gradient suite ---------------------------------------------


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    results = run_gradient_suite(configs_per_layer=20, seed=0)
    elapsed = time.perf_counter() - t0
    worst_name, worst = max(results.items(), key=lambda kv: kv[1])
    passed = all(v < 1e-4 for v in results.values()) and elapsed < 300
    report(
        1,
        passed,
        f"{len(results)} layer families x 20 configs, worst {worst_name} "
        f"rel err {worst:.2e} < 1e-4, runtime {elapsed:.1f}s < 300s",
    )


# -- criterion 2: convolution oracle ------------------------------------------


def test_criterion_2_conv_oracle():
    worst = 0.0
    for case in range(200):
        rng = Rng(20_000 + case)
        groups_choice = [1, 2, "batch"][case % 3]
        b = int(rng.integers(1, 4))
        groups = b if groups_choice == "batch" else groups_choice
        c_in = groups * int(rng.integers(1, 4))
        c_out = groups * int(rng.integers(1, 4))
        k = 1 if case % 2 else 3
        stride = 1 + (case // 2) % 2
        pad = (k - 1) // 2 if rng.integers(0, 2) else 0
        ho = int(rng.integers(1, 5))
        wo = int(rng.integers(1, 5))
        h = stride * (ho - 1) + k - 2 * pad
        w = stride * (wo - 1) + k - 2 * pad
        x = rng.normal((b, c_in, h, w))
        wt = rng.normal((c_out, c_in // groups, k, k))
        bias = rng.normal((c_out,)) if rng.integers(0, 2) else None
        fast = ad.conv2d_raw(x, wt, bias, stride, pad, groups)
        ref = conv2d_naive(x, wt, bias, stride, pad, groups)
        worst = max(worst, float(np.abs(fast - ref).max()))
    report(2, worst < 1e-5, f"200 randomized conv cases, max |fast - naive| = {worst:.2e} < 1e-5")


# -- criterion 3: batch decomposition + hidden-dimension law -------------------


def test_criterion_3_dpconv_batch_decomposition():
    worst = 0.0
    for case in range(50):
        rng = Rng(30_000 + case)
        cfg = DPConvConfig(
            c_in=int(rng.integers(1, 5)),
            c_out=int(rng.integers(1, 4)),
            k=1 if rng.integers(0, 2) else 3,
            c_info=int(rng.integers(2, 8)),
        )
        assert cfg.hidden == cfg.c_in * cfg.c_out * cfg.k * cfg.k
        gen = GeneratorNet(cfg, rng)
        b = int(rng.integers(2, 5))
        h = int(rng.integers(3, 7))
        hr = int(rng.integers(2, 5))
        f_s = rng.normal((b, cfg.c_in, h, h))
        f_r = rng.normal((b, cfg.c_info, hr, hr))
        theta = gen(Node(f_r))
        assert theta.value[0].size == cfg.hidden
        batched = dpconv_forward(Node(f_s), Node(f_r), gen).value
        for i in range(b):
            single = dpconv_forward(Node(f_s[i : i + 1]), Node(f_r[i : i + 1]), gen).value
            worst = max(worst, float(np.abs(batched[i : i + 1] - single).max()))
    report(
        3,
        worst < 1e-6,
        f"50 random configs: batched == per-sample within {worst:.2e} < 1e-6; "
        f"hidden dim == c_in*c_out*k^2 in all configs",
    )


# -- criterion 4: combination baseline identities ------------------------------


def test_criterion_4_combination_baseline_identity():
    rng = Rng(40_000)
    worst_single = 0.0
    layer1 = CombinationDynConv(3, 4, 3, n_kernels=1, rng=rng)
    for _ in range(10):
        x = rng.normal((2, 3, 6, 6))
        out = layer1(Node(x)).value
        ref = ad.conv2d_raw(x, layer1.bank.value[0], None, 1, 1, 1)
        worst_single = max(worst_single, float(np.abs(out - ref).max()))
    worst_equal = 0.0
    layer4 = CombinationDynConv(2, 3, 1, n_kernels=4, rng=rng)
    layer4.bank.value[:] = layer4.bank.value[0]
    for _ in range(10):
        x = rng.normal((3, 2, 5, 5))
        out = layer4(Node(x)).value
        ref = ad.conv2d_raw(x, layer4.bank.value[0], None, 1, 0, 1)
        worst_equal = max(worst_equal, float(np.abs(out - ref).max()))
    report(
        4,
        worst_single < 1e-6 and worst_equal < 1e-6,
        f"n=1 matches standard conv within {worst_single:.2e}; identical bank "
        f"matches within {worst_equal:.2e} (both < 1e-6)",
    )


# -- shared desk-scale fixtures ------------------------------------------------

DESK_MODEL = ModelConfig(levels=3, widths=(8, 16, 32), in_channels=1)


@pytest.fixture(scope="module")
def freeze_run():
    """10-epoch phase-two run against a short phase-one checkpoint."""
    data = synth_weak_targets(40, 32, Rng(900), "easy")
    small = ModelConfig(levels=3, widths=(4, 8, 16), in_channels=1)
    cfg = TrainConfig(seed=3, batch_size=8, epochs_recon=3, epochs_seg=10)
    ck1 = train_phase_one(SRSModel(small, seed=3), data, cfg)
    model = SRSModel(small, seed=3)
    ck2 = train_phase_two(model, data, ck1, cfg)
    return ck1, ck2, model


# -- criterion 5: freeze invariant ---------------------------------------------


def test_criterion_5_freeze_invariant(freeze_run):
    ck1, _, model = freeze_run
    mismatches = [
        name
        for name, arr in model.named_state().items()
        if name.startswith("recon_encoder.") and not np.array_equal(arr, ck1.tensors[name])
    ]
    n_checked = sum(1 for n in model.named_state() if n.startswith("recon_encoder."))
    report(
        5,
        not mismatches,
        f"after a 10-epoch phase-two run, {n_checked} reconstruction-encoder "
        f"tensors are bitwise identical to the phase-one checkpoint "
        f"(mismatches: {mismatches[:3] if mismatches else 'none'})",
    )


# -- criterion 6: schedule -------------------------------------------------------


def test_criterion_6_schedule():
    cfg = TrainConfig()
    v0 = lr_at(0, cfg, 300)
    v_end = lr_at(300, cfg, 300)
    v_mid = lr_at(150, cfg, 300)
    expected_mid = 0.01 * 0.5**0.9
    passed = v0 == 0.01 and v_end == 0.0 and abs(v_mid - expected_mid) < 1e-7
    report(
        6,
        passed,
        f"lr(0)={v0}, lr(300/300)={v_end}, lr(150/300)={v_mid:.7e} vs "
        f"0.01*0.5^0.9={expected_mid:.7e} within 1e-7",
    )


# -- criterion 7: metric oracles -------------------------------------------------


def test_criterion_7_metric_oracles():
    from test_metrics import brute_force_hd95

    def check_pair(a, b):
        i = iou(a, b)
        f = f1_dice(a, b)
        inter = float(np.logical_and(a > 0.5, b > 0.5).sum())
        union = float(np.logical_or(a > 0.5, b > 0.5).sum())
        total = float((a > 0.5).sum() + (b > 0.5).sum())
        oracle_i = 1.0 if union == 0 else inter / union
        oracle_f = 1.0 if total == 0 else 2 * inter / total
        assert i == pytest.approx(oracle_i, abs=0), "iou oracle"
        assert f == pytest.approx(oracle_f, abs=0), "f1 oracle"
        assert f == pytest.approx(2 * i / (1 + i), abs=1e-9), "f1-iou identity"
        return abs(hd95(a, b) - brute_force_hd95(a, b))

    worst_hd = 0.0
    # exhaustive 3x3 enumeration over unordered mask pairs (hd95 symmetric,
    # overlap metrics checked per ordered call)
    masks = [np.array([(m >> k) & 1 for k in range(9)], np.float32).reshape(3, 3) for m in range(512)]
    for ia in range(512):
        for ib in range(ia, 512):
            worst_hd = max(worst_hd, check_pair(masks[ia], masks[ib]))
    rng = Rng(70_000)
    for _ in range(100):
        a = (rng.uniform(0, 1, (32, 32)) < 0.3).astype(np.float32)
        b = (rng.uniform(0, 1, (32, 32)) < 0.3).astype(np.float32)
        worst_hd = max(worst_hd, check_pair(a, b))
    report(
        7,
        worst_hd < 1e-4,
        f"exhaustive 3x3 pairs + 100 random 32x32 masks: overlap metrics exact, "
        f"f1 = 2*iou/(1+iou) everywhere, hd95 within {worst_hd:.2e} < 1e-4",
    )


# -- criterion 8: desk-scale end-to-end ------------------------------------------


@pytest.mark.slow
def test_criterion_8_desk_scale_end_to_end():
    t0 = time.perf_counter()
    train = synth_weak_targets(500, 64, Rng(8001), "easy")
    test = synth_weak_targets(200, 64, Rng(8002), "easy")
    cfg = TrainConfig(seed=8, batch_size=8, epochs_recon=30, epochs_seg=40)
    model = SRSModel(DESK_MODEL, seed=8)
    ck1 = train_phase_one(model, train, cfg)
    seg_model = SRSModel(DESK_MODEL, seed=8)
    train_phase_two(seg_model, train, ck1, cfg)
    test_iou = evaluate(seg_model, test, with_flops=False).mean_iou
    elapsed = time.perf_counter() - t0
    report(
        8,
        test_iou >= 0.80 and elapsed <= 1800,
        f"500 train / 200 test easy 64x64, 30+40 epochs: test IoU {test_iou:.4f} "
        f">= 0.80 in {elapsed / 60:.1f} min <= 30 min",
    )


# -- criteria 9 & 10: ablation directions ----------------------------------------

ABLATION_SEEDS = (0, 1, 2)
ABLATION_EPOCHS_RECON = 12
ABLATION_EPOCHS_SEG = 30
ABLATION_N_TRAIN = 100
ABLATION_N_TEST = 50


@pytest.fixture(scope="module")
def ablation_runs():
    """Hard-mode runs shared by the two directional criteria."""
    results = {"pure_seg": [], "dpconv_seg": [], "dpconv_recon": [], "masked_recon": []}
    for seed in ABLATION_SEEDS:
        train = synth_weak_targets(ABLATION_N_TRAIN, 64, Rng(1234 + seed), "hard")
        test = synth_weak_targets(ABLATION_N_TEST, 64, Rng(777 + seed), "hard")
        cfg = TrainConfig(
            seed=seed,
            batch_size=8,
            epochs_recon=ABLATION_EPOCHS_RECON,
            epochs_seg=ABLATION_EPOCHS_SEG,
        )
        ck_direct = train_phase_one(SRSModel(DESK_MODEL, seed=seed), train, cfg)
        ck_masked = train_phase_one(
            SRSModel(DESK_MODEL, seed=seed),
            train,
            dataclasses.replace(cfg, recon_mode="masked", mask_patch=8, mask_ratio=0.5),
        )
        for label, variant, ck in (
            ("pure_seg", "pure_seg", None),
            ("dpconv_seg", "dpconv_seg", None),
            ("dpconv_recon", "dpconv_recon", ck_direct),
            ("masked_recon", "dpconv_recon", ck_masked),
        ):
            model = build_ablation(variant, DESK_MODEL, seed=seed)
            train_phase_two(model, train, ck, cfg)
            results[label].append(evaluate(model, test, with_flops=False).mean_iou)
    return {k: np.array(v) for k, v in results.items()}


@pytest.mark.slow
def test_criterion_9_ablation_direction(ablation_runs):
    pure = ablation_runs["pure_seg"].mean()
    seg_fed = ablation_runs["dpconv_seg"].mean()
    recon = ablation_runs["dpconv_recon"].mean()
    passed = recon >= pure and recon >= seg_fed
    report(
        9,
        passed,
        f"hard-mode mean IoU over {len(ABLATION_SEEDS)} seeds: "
        f"dpconv_recon {recon:.4f} >= pure_seg {pure:.4f} and "
        f">= dpconv_seg {seg_fed:.4f} "
        f"(per-seed recon {np.round(ablation_runs['dpconv_recon'], 3).tolist()}, "
        f"pure {np.round(ablation_runs['pure_seg'], 3).tolist()})",
    )


@pytest.mark.slow
def test_criterion_10_reconstruction_mode_direction(ablation_runs):
    masked = ablation_runs["masked_recon"].mean()
    direct = ablation_runs["dpconv_recon"].mean()
    report(
        10,
        masked >= direct,
        f"hard-mode mean IoU over {len(ABLATION_SEEDS)} seeds: masked-pretrained "
        f"{masked:.4f} >= direct-pretrained {direct:.4f} "
        f"(per-seed masked {np.round(ablation_runs['masked_recon'], 3).tolist()}, "
        f"direct {np.round(ablation_runs['dpconv_recon'], 3).tolist()})",
    )


# -- criterion 11: determinism & persistence --------------------------------------


def test_criterion_11_determinism_and_persistence(tmp_path, freeze_run):
    data = synth_weak_targets(24, 32, Rng(910), "easy")
    small = ModelConfig(levels=3, widths=(4, 8, 16), in_channels=1)
    cfg = TrainConfig(seed=4, batch_size=8, epochs_recon=2, epochs_seg=2)

    def run_once():
        ck1 = train_phase_one(SRSModel(small, seed=4), data, cfg)
        model = SRSModel(small, seed=4)
        ck2 = train_phase_two(model, data, ck1, cfg, val_dataset=data[:8])
        return ck2

    a, b = run_once(), run_once()
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_seconds"} for r in rows]
    logs_equal = strip(a.log_rows) == strip(b.log_rows)
    tensors_equal = all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)

    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, p1)
    save_checkpoint(load_checkpoint(p1), p2)
    bytes_equal = p1.read_bytes() == p2.read_bytes()

    truncated = tmp_path / "t.ckpt"
    truncated.write_bytes(p1.read_bytes()[:-17])
    try:
        load_checkpoint(truncated)
        truncation_rejected = False
    except ChecksumMismatch:
        truncation_rejected = True

    passed = logs_equal and tensors_equal and bytes_equal and truncation_rejected
    report(
        11,
        passed,
        f"same-seed logs identical: {logs_equal}; tensors identical: {tensors_equal}; "
        f"save->load->save byte-identical: {bytes_equal}; truncated checkpoint "
        f"rejected: {truncation_rejected}",
    )
