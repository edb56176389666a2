import numpy as np
import pytest

from srs.checkpoint import FORMAT_VERSION, MAGIC, Checkpoint, load_checkpoint, save_checkpoint
from srs.errors import ChecksumMismatch, VersionMismatch
from srs.tensor import Rng


def sample_checkpoint():
    rng = Rng(0)
    return Checkpoint(
        config={"format_version": FORMAT_VERSION, "phase": "seg", "epoch": 7,
                "model": {"levels": 3}, "rng_state": Rng(5).state()},
        tensors={
            "enc.weight": rng.normal((4, 3, 3, 3)),
            "enc.bias": rng.normal((4,)),
            "opt/enc.weight": rng.normal((4, 3, 3, 3)),
        },
    )


class TestRoundTrip:
    def test_bitwise_lossless(self, tmp_path):
        ckpt = sample_checkpoint()
        path = tmp_path / "a.ckpt"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        assert loaded.config == ckpt.config
        assert list(loaded.tensors) == list(ckpt.tensors)
        for name in ckpt.tensors:
            assert np.array_equal(loaded.tensors[name], ckpt.tensors[name])

    def test_save_load_save_byte_identical(self, tmp_path):
        ckpt = sample_checkpoint()
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(ckpt, p1)
        save_checkpoint(load_checkpoint(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_magic_prefix(self, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(sample_checkpoint(), path)
        assert path.read_bytes().startswith(MAGIC)

    def test_rng_state_resumes(self, tmp_path):
        rng = Rng(11)
        rng.normal((3,))
        ckpt = Checkpoint(config={"rng_state": rng.state()})
        path = tmp_path / "a.ckpt"
        save_checkpoint(ckpt, path)
        resumed = Rng.from_state(load_checkpoint(path).config["rng_state"])
        assert np.array_equal(rng.normal((10,)), resumed.normal((10,)))


class TestCorruption:
    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(sample_checkpoint(), path)
        raw = path.read_bytes()
        for cut in (10, len(raw) // 2, len(raw) - 1):
            bad = tmp_path / f"cut{cut}.ckpt"
            bad.write_bytes(raw[:cut])
            with pytest.raises(ChecksumMismatch):
                load_checkpoint(bad)

    def test_flipped_byte_rejected(self, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(sample_checkpoint(), path)
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        bad = tmp_path / "flip.ckpt"
        bad.write_bytes(bytes(raw))
        with pytest.raises(ChecksumMismatch):
            load_checkpoint(bad)

    def test_wrong_magic_rejected(self, tmp_path):
        import hashlib

        body = b"SRSCKPT9" + b"\x00" * 16
        path = tmp_path / "a.ckpt"
        path.write_bytes(body + hashlib.blake2b(body, digest_size=8).digest())
        with pytest.raises(VersionMismatch):
            load_checkpoint(path)

    def test_wrong_format_version_rejected(self, tmp_path):
        ckpt = sample_checkpoint()
        ckpt.config["format_version"] = 99
        path = tmp_path / "a.ckpt"
        save_checkpoint(ckpt, path)
        with pytest.raises(VersionMismatch):
            load_checkpoint(path)


class TestModelIntegration:
    def test_mismatched_config_load_rejected(self, tmp_path):
        from srs.errors import CheckpointMismatch
        from srs.model import ModelConfig, SRSModel

        model = SRSModel(ModelConfig(levels=3, widths=(4, 8, 16), in_channels=1), seed=0)
        state = {k: v.copy() for k, v in model.named_state().items()}
        other = SRSModel(ModelConfig(levels=3, widths=(6, 8, 16), in_channels=1), seed=0)
        with pytest.raises(CheckpointMismatch):
            other.load_state(state)

    def test_save_load_forward_bitwise(self, tmp_path):
        import warnings

        from srs import autodiff as ad
        from srs.autodiff import Node
        from srs.model import ModelConfig, SRSModel

        warnings.simplefilter("ignore")
        cfg = ModelConfig(levels=3, widths=(4, 8, 16), in_channels=1)
        model = SRSModel(cfg, seed=1)
        model.eval()
        x = Node(Rng(2).normal((2, 1, 16, 16)))
        with ad.no_grad():
            before, _ = model.seg_forward(x)
        ckpt = Checkpoint(
            config={"model": cfg.to_dict(), "phase": "seg"},
            tensors={k: v.copy() for k, v in model.named_state().items()},
        )
        path = tmp_path / "m.ckpt"
        save_checkpoint(ckpt, path)
        restored = SRSModel(cfg, seed=99)  # different init, then overwritten
        restored.load_state(load_checkpoint(path).tensors)
        restored.eval()
        restored.recon_weights_loaded = True
        with ad.no_grad():
            after, _ = restored.seg_forward(x)
        assert np.array_equal(before.value, after.value)
