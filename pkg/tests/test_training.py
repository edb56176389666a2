import dataclasses
import warnings

import numpy as np
import pytest

from srs import autodiff as ad
from srs.autodiff import Node
from srs.data import synth_weak_targets
from srs.errors import (
    DivisibilityError,
    EmptyDataset,
    EpochOutOfRange,
    NonBinaryTarget,
    ShapeMismatch,
)
from srs.model import ModelConfig, SRSModel
from srs.tensor import Rng
from srs.training import (
    SGD,
    TrainConfig,
    loss_recon,
    loss_recon_masked,
    loss_seg,
    lr_at,
    masked_reconstruction_batch,
    train_phase_one,
    train_phase_two,
)

SMALL_MODEL = ModelConfig(levels=3, widths=(4, 8, 16), in_channels=1)
warnings.filterwarnings("ignore", category=UserWarning)


def small_cfg(**kw):
    base = dict(seed=1, batch_size=8, epochs_recon=3, epochs_seg=3)
    base.update(kw)
    return TrainConfig(**base)


class TestLossRecon:
    def test_perfect_reconstruction_is_zero(self):
        t = Rng(0).normal((2, 1, 4, 4))
        assert loss_recon(Node(t.copy()), t).item() == 0.0

    def test_uniform_unit_error_single_sample(self):
        t = Rng(1).normal((1, 1, 4, 4))
        assert loss_recon(Node(t + 1.0), t).item() == pytest.approx(0.5, abs=1e-6)

    def test_quadratic_scaling(self):
        t = Rng(2).normal((2, 1, 4, 4))
        l1 = loss_recon(Node(t + 0.5), t).item()
        l2 = loss_recon(Node(t + 1.0), t).item()
        assert l2 / l1 == pytest.approx(4.0, rel=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            loss_recon(Node(np.zeros((1, 1, 2, 2), np.float32)), np.zeros((1, 1, 4, 4), np.float32))

    def test_gradient_is_scaled_residual(self):
        t = Rng(3).normal((2, 1, 3, 3), dtype=np.float64)
        r = Node(Rng(4).normal((2, 1, 3, 3), dtype=np.float64), requires_grad=True)
        ad.backward(loss_recon(r, t))
        assert np.allclose(r.grad, (r.value - t) / r.value.size)

    def test_masked_loss_ignores_visible_pixels(self):
        t = Rng(5).normal((2, 1, 4, 4))
        mask = np.zeros((2, 1, 4, 4), np.float32)
        mask[:, :, :2] = 1.0
        r = t.copy()
        r[:, :, 2:] += 100.0  # visible region error must not count
        assert loss_recon_masked(Node(r), t, mask).item() == pytest.approx(0.0, abs=1e-8)
        r2 = t.copy()
        r2[:, :, :2] += 1.0
        assert loss_recon_masked(Node(r2), t, mask).item() == pytest.approx(0.5, abs=1e-6)


class TestLossSeg:
    def test_perfect_prediction_near_zero(self):
        t = (Rng(0).uniform(0, 1, (2, 1, 4, 4)) > 0.5).astype(np.float32)
        logits = (t * 2 - 1) * 20.0  # +-20 logits saturate the sigmoid
        assert loss_seg(Node(logits), t).item() < 1e-3

    def test_half_probability_reference_value(self):
        # p = 0.5 everywhere, target half ones: BCE = ln 2; dice from the formula
        n = 16
        t = np.zeros((1, 1, 4, 4), np.float32)
        t[0, 0, :2] = 1.0
        logits = np.zeros((1, 1, 4, 4), np.float32)
        eps = 1e-5
        inter, psum, ssum = 0.5 * (n / 2), 0.5 * n, n / 2
        expected = 0.5 * np.log(2.0) + (1.0 - (2 * inter + eps) / (psum + ssum + eps))
        assert loss_seg(Node(logits), t).item() == pytest.approx(expected, rel=1e-5)

    def test_nonbinary_target_rejected(self):
        with pytest.raises(NonBinaryTarget):
            loss_seg(Node(np.zeros((1, 1, 2, 2), np.float32)), np.full((1, 1, 2, 2), 0.5, np.float32))

    def test_loss_nonnegative_and_bounded_parts(self):
        rng = Rng(6)
        for _ in range(10):
            t = (rng.uniform(0, 1, (2, 1, 4, 4)) > 0.3).astype(np.float32)
            z = rng.normal((2, 1, 4, 4), std=3.0)
            assert loss_seg(Node(z), t).item() >= 0.0

    def test_gradient_check(self):
        rng = Rng(7)
        t = (rng.uniform(0, 1, (2, 1, 3, 3)) > 0.5).astype(np.float64)
        z0 = rng.normal((2, 1, 3, 3), dtype=np.float64)
        assert ad.grad_check(lambda z: loss_seg(z, t), z0) < 1e-4


class TestSchedule:
    def test_endpoints(self):
        cfg = TrainConfig()
        assert lr_at(0, cfg, 300) == pytest.approx(0.01)
        assert lr_at(300, cfg, 300) == 0.0

    def test_midpoint_value(self):
        cfg = TrainConfig()
        assert lr_at(150, cfg, 300) == pytest.approx(0.01 * 0.5**0.9, abs=1e-9)

    def test_strictly_decreasing(self):
        cfg = TrainConfig()
        values = [lr_at(e, cfg, 100) for e in range(101)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_out_of_range(self):
        with pytest.raises(EpochOutOfRange):
            lr_at(301, TrainConfig(), 300)
        with pytest.raises(EpochOutOfRange):
            lr_at(-1, TrainConfig(), 300)


class TestSGD:
    def _param(self, val):
        return {"w": Node(np.array(val, dtype=np.float32), requires_grad=True)}

    def test_zero_grad_no_decay_no_change(self):
        params = self._param([1.0, -2.0])
        opt = SGD(params, momentum=0.9, weight_decay=0.0)
        opt.step(0.1)
        assert np.array_equal(params["w"].value, [1.0, -2.0])

    def test_single_step_unrolled(self):
        params = self._param([1.0, 2.0])
        g = np.array([0.5, -0.25], np.float32)
        params["w"].grad = g.copy()
        wd, lr = 1e-2, 0.1
        theta0 = params["w"].value.copy()
        opt = SGD(params, momentum=0.9, weight_decay=wd)
        opt.step(lr)
        expected = theta0 - lr * (g + wd * theta0)
        assert np.allclose(params["w"].value, expected, atol=1e-7)

    def test_two_steps_accumulate_momentum(self):
        params = self._param([0.0])
        g = np.array([1.0], np.float32)
        lr, mom = 0.1, 0.9
        opt = SGD(params, momentum=mom, weight_decay=0.0)
        params["w"].grad = g.copy()
        opt.step(lr)
        first_delta = -lr * g
        assert np.allclose(params["w"].value, first_delta)
        params["w"].grad = g.copy()
        opt.step(lr)
        second_delta = -lr * (1 + mom) * g
        assert np.allclose(params["w"].value, first_delta + second_delta, atol=1e-6)

    def test_frozen_params_untouched(self):
        params = {
            "a": Node(np.ones(3, np.float32), requires_grad=True),
            "b": Node(np.ones(3, np.float32), requires_grad=True),
        }
        params["a"].grad = np.ones(3, np.float32)
        params["b"].grad = np.ones(3, np.float32)
        opt = SGD(params, frozen={"b"})
        opt.step(0.5)
        assert not np.array_equal(params["a"].value, np.ones(3))
        assert np.array_equal(params["b"].value, np.ones(3))


class TestMaskedBatch:
    def test_tile_count_64_16_half(self):
        images = Rng(0).normal((2, 1, 64, 64))
        _, mask = masked_reconstruction_batch(images, Rng(1), patch=16, ratio=0.5)
        per_image = mask[:, 0].reshape(2, -1).sum(axis=1) / (16 * 16)
        assert np.all(per_image == 8)  # round(0.5 * 16 tiles)

    def test_masked_pixels_are_zero(self):
        images = np.abs(Rng(2).normal((3, 1, 32, 32))) + 1.0
        masked, mask = masked_reconstruction_batch(images, Rng(3), patch=8, ratio=0.4)
        assert np.all(masked[mask.astype(bool)] == 0.0)
        keep = ~mask.astype(bool)
        assert np.array_equal(masked[keep], images[keep])

    def test_ratio_zero_rejected(self):
        with pytest.raises(ValueError):
            masked_reconstruction_batch(np.zeros((1, 1, 32, 32), np.float32), Rng(0), 16, 0.0)

    def test_indivisible_patch_rejected(self):
        with pytest.raises(DivisibilityError):
            masked_reconstruction_batch(np.zeros((1, 1, 30, 30), np.float32), Rng(0), 16, 0.5)


@pytest.fixture(scope="module")
def tiny_dataset():
    return synth_weak_targets(24, 32, Rng(50), "easy")


class TestPhases:
    def test_phase_one_loss_decreases(self, tiny_dataset):
        model = SRSModel(SMALL_MODEL, seed=0)
        ckpt = train_phase_one(model, tiny_dataset, small_cfg(epochs_recon=6))
        losses = [float(r["train_loss"]) for r in ckpt.log_rows]
        assert losses[-1] < losses[0]

    def test_phase_one_empty_dataset(self):
        with pytest.raises(EmptyDataset):
            train_phase_one(SRSModel(SMALL_MODEL, seed=0), [], small_cfg())

    def test_phase_one_determinism(self, tiny_dataset):
        cka = train_phase_one(SRSModel(SMALL_MODEL, seed=0), tiny_dataset, small_cfg())
        ckb = train_phase_one(SRSModel(SMALL_MODEL, seed=0), tiny_dataset, small_cfg())
        assert set(cka.tensors) == set(ckb.tensors)
        for name in cka.tensors:
            assert np.array_equal(cka.tensors[name], ckb.tensors[name]), name
        strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_seconds"} for r in rows]
        assert strip(cka.log_rows) == strip(ckb.log_rows)

    def test_phase_one_checkpoint_covers_recon_only(self, tiny_dataset):
        ckpt = train_phase_one(SRSModel(SMALL_MODEL, seed=0), tiny_dataset, small_cfg())
        model_names = [n for n in ckpt.tensors if not n.startswith("opt/")]
        assert model_names and all(n.startswith("recon_") for n in model_names)

    def test_masked_mode_masked_region_error_decreases(self, tiny_dataset):
        cfg = small_cfg(recon_mode="masked", mask_patch=8, mask_ratio=0.5, epochs_recon=8)
        model = SRSModel(SMALL_MODEL, seed=0)
        ckpt = train_phase_one(model, tiny_dataset, cfg)
        losses = [float(r["train_loss"]) for r in ckpt.log_rows]
        assert losses[-1] < 0.7 * losses[0]

    def test_phase_two_freeze_and_logging(self, tiny_dataset):
        ck1 = train_phase_one(SRSModel(SMALL_MODEL, seed=0), tiny_dataset, small_cfg())
        model = SRSModel(SMALL_MODEL, seed=0)
        ck2 = train_phase_two(model, tiny_dataset, ck1, small_cfg(), val_dataset=tiny_dataset[:8])
        for name, arr in model.named_state().items():
            if name.startswith("recon_encoder."):
                assert np.array_equal(arr, ck1.tensors[name]), name
        assert all(r["val_iou"] != "" for r in ck2.log_rows)

    def test_phase_two_no_freeze_updates_encoder(self, tiny_dataset):
        ck1 = train_phase_one(SRSModel(SMALL_MODEL, seed=0), tiny_dataset, small_cfg())
        model = SRSModel(SMALL_MODEL, seed=0)
        train_phase_two(model, tiny_dataset, ck1, small_cfg(freeze=False))
        changed = any(
            not np.array_equal(arr, ck1.tensors[name])
            for name, arr in model.named_state().items()
            if name.startswith("recon_encoder.") and name.endswith("weight")
        )
        assert changed

    def test_phase_two_checkpoint_mismatch(self, tiny_dataset):
        ck1 = train_phase_one(SRSModel(SMALL_MODEL, seed=0), tiny_dataset, small_cfg())
        from srs.errors import CheckpointMismatch

        wrong = ModelConfig(levels=3, widths=(6, 8, 16), in_channels=1)
        with pytest.raises(CheckpointMismatch):
            train_phase_two(SRSModel(wrong, seed=0), tiny_dataset, ck1, small_cfg())

    def test_pure_seg_trains_without_phase_one(self, tiny_dataset):
        cfg_model = ModelConfig(levels=3, widths=(4, 8, 16), in_channels=1, variant="pure_seg")
        ckpt = train_phase_two(SRSModel(cfg_model, seed=0), tiny_dataset, None, small_cfg())
        assert ckpt.config["phase"] == "seg"
