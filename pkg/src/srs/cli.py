"""Command-line surface: synth, train-recon, train-seg, eval, gradcheck, count.

Hyperparameter defaults follow the training recipe (SGD momentum 0.9,
weight decay 1e-4, lr 0.01 with polynomial decay, batch 8, 100/300
epochs), so a bare invocation reproduces it. Precedence: CLI flag >
config file > built-in default. SRS_SEED serves as the seed fallback.
Exit codes: 0 success, 1 usage, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np

from . import report
from .checkpoint import load_checkpoint, save_checkpoint
from .data import load_image_dir, resize_sample, save_dataset, synth_weak_targets
from .dpconv import DPConvConfig
from .errors import EngineError
from .gradsuite import run_gradient_suite
from .metrics import count_forward_flops, count_model_params, evaluate, predict_masks
from .model import VARIANTS, ModelConfig, SRSModel
from .tensor import Rng
from .training import TrainConfig, train_phase_one, train_phase_two, write_metrics_csv

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _default_seed() -> int:
    return int(os.environ.get("SRS_SEED", "0"))


def _add_model_flags(p: argparse.ArgumentParser):
    p.add_argument("--levels", type=int, default=None, help="encoder levels (default 4)")
    p.add_argument("--widths", type=str, default=None,
                   help="comma-separated channel widths, one per level (default 16,32,64,128)")
    p.add_argument("--c-info", type=int, default=None, help="generator information channels (default 64)")
    p.add_argument("--c-in", type=int, default=None, help="dynamic kernel input channels (default 8)")
    p.add_argument("--c-out", type=int, default=None, help="dynamic kernel output channels (default 1)")
    p.add_argument("--kernel-size", type=int, default=None, help="dynamic kernel size (default 1)")


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", type=str, default=None, help="JSON config file (flags override it)")
    p.add_argument("--seed", type=int, default=None, help="run seed (fallback: SRS_SEED, then 0)")
    p.add_argument("--lr0", type=float, default=None, help="initial learning rate (default 0.01)")
    p.add_argument("--momentum", type=float, default=None, help="SGD momentum (default 0.9)")
    p.add_argument("--weight-decay", type=float, default=None, help="L2 weight decay (default 1e-4)")
    p.add_argument("--batch-size", type=int, default=None, help="batch size (default 8)")
    p.add_argument("--no-augment", action="store_true", help="disable rotation/flip augmentation")
    p.add_argument("--resize", type=int, default=None, help="resize samples to this side before training")


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _build_train_config(args, file_cfg: dict, **extra) -> TrainConfig:
    cfg = TrainConfig()
    valid = {f.name for f in dataclass_fields(TrainConfig)}
    for key, val in file_cfg.items():
        if key in valid:
            setattr(cfg, key, val)
    overrides = {
        "seed": args.seed,
        "lr0": args.lr0,
        "momentum": args.momentum,
        "weight_decay": args.weight_decay,
        "batch_size": args.batch_size,
        **extra,
    }
    for key, val in overrides.items():
        if val is not None:
            setattr(cfg, key, val)
    if args.seed is None and "seed" not in file_cfg:
        cfg.seed = _default_seed()
    if args.no_augment:
        cfg.augment = False
    return cfg


def _build_model_config(args, file_cfg: dict, variant: str, in_channels: int) -> ModelConfig:
    mc = file_cfg.get("model", {})
    levels = args.levels if args.levels is not None else mc.get("levels", 4)
    if args.widths is not None:
        widths = tuple(int(w) for w in args.widths.split(","))
    else:
        widths = tuple(mc.get("widths", (16, 32, 64, 128)[:levels] if levels <= 4 else None)
                       or (16, 32, 64, 128))
    dp = mc.get("dpconv", {})
    dpcfg = DPConvConfig(
        c_in=args.c_in if args.c_in is not None else dp.get("c_in", 8),
        c_out=args.c_out if args.c_out is not None else dp.get("c_out", 1),
        k=args.kernel_size if args.kernel_size is not None else dp.get("k", 1),
        c_info=args.c_info if args.c_info is not None else dp.get("c_info", 64),
        conv_b_groups=dp.get("conv_b_groups"),
        conv_b_bias=dp.get("conv_b_bias", False),
    )
    return ModelConfig(levels=levels, widths=widths, in_channels=in_channels,
                       variant=variant, dpconv=dpcfg)


def _load_dataset(root, need_masks: bool, resize: int | None):
    root = Path(root)
    masks_dir = root / "masks"
    data = load_image_dir(root / "images", masks_dir if (need_masks or masks_dir.is_dir()) else None)
    if resize is not None:
        data = [resize_sample(s, resize) for s in data]
    return data


def _archive_run_config(out_dir: Path, command: str, train_cfg, model_cfg, extra: dict):
    doc = {
        "command": command,
        "train_config": train_cfg.to_dict() if train_cfg else None,
        "model_config": model_cfg.to_dict() if model_cfg else None,
        **extra,
    }
    (out_dir / "run_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# -- subcommands -------------------------------------------------------------


def cmd_synth(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    data = synth_weak_targets(args.n, args.size, Rng(seed), args.mode)
    out = Path(args.out)
    save_dataset(data, out)
    print(f"wrote {len(data)} image/mask pairs to {out}")
    return EXIT_OK


def cmd_train_recon(args) -> int:
    file_cfg = _load_config_file(args.config)
    cfg = _build_train_config(
        args, file_cfg,
        epochs_recon=args.epochs,
        recon_mode=args.recon_mode,
        mask_patch=args.mask_patch,
        mask_ratio=args.mask_ratio,
    )
    data = _load_dataset(args.data, need_masks=False, resize=args.resize)
    mcfg = _build_model_config(args, file_cfg, "dpconv_recon", data[0].image.shape[0])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = SRSModel(mcfg, seed=cfg.seed)
    ckpt = train_phase_one(model, data, cfg, log_path=out / "metrics.csv")
    save_checkpoint(ckpt, out / "checkpoint.ckpt")
    report.save_training_curves(ckpt.log_rows, out / "curves.png")
    _archive_run_config(out, "train-recon", cfg, mcfg, {"data": str(args.data)})
    print(f"phase-one checkpoint: {out / 'checkpoint.ckpt'}")
    print(f"final train loss: {ckpt.log_rows[-1]['train_loss']}")
    return EXIT_OK


def cmd_train_seg(args) -> int:
    if args.variant == "dpconv_recon" and not args.phase1_ckpt:
        print(
            "srs train-seg: error: --phase1-ckpt is required unless "
            "--variant pure_seg or --variant dpconv_seg",
            file=sys.stderr,
        )
        return EXIT_USAGE
    file_cfg = _load_config_file(args.config)
    cfg = _build_train_config(args, file_cfg, epochs_seg=args.epochs,
                              freeze=False if args.no_freeze else None)
    data = _load_dataset(args.data, need_masks=True, resize=args.resize)
    val = _load_dataset(args.val_data, need_masks=True, resize=args.resize) if args.val_data else None
    mcfg = _build_model_config(args, file_cfg, args.variant, data[0].image.shape[0])
    phase1 = load_checkpoint(args.phase1_ckpt) if args.phase1_ckpt else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = SRSModel(mcfg, seed=cfg.seed)
    ckpt = train_phase_two(model, data, phase1, cfg, val_dataset=val, log_path=out / "metrics.csv")
    save_checkpoint(ckpt, out / "checkpoint.ckpt")
    report.save_training_curves(ckpt.log_rows, out / "curves.png")
    _archive_run_config(out, "train-seg", cfg, mcfg,
                        {"data": str(args.data), "phase1_ckpt": args.phase1_ckpt,
                         "variant": args.variant})
    print(f"phase-two checkpoint: {out / 'checkpoint.ckpt'}")
    print(f"final train loss: {ckpt.log_rows[-1]['train_loss']}")
    return EXIT_OK


def model_from_checkpoint(ckpt) -> SRSModel:
    mcfg = ModelConfig.from_dict(ckpt.config["model"])
    model = SRSModel(mcfg, seed=0)
    if ckpt.config.get("phase") == "seg" and model.recon_decoder is not None:
        model.drop_recon_decoder()
    model.load_state(ckpt.tensors)
    model.recon_weights_loaded = True
    model.eval()
    return model


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    if ckpt.config.get("phase") != "seg":
        raise EngineError(f"{args.ckpt} is not a segmentation checkpoint")
    model = model_from_checkpoint(ckpt)
    data = _load_dataset(args.data, need_masks=True, resize=args.resize)
    rep = evaluate(model, data, threshold=args.threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep.write_json(out / "report.json")
    rep.write_csv(out / "report.csv")
    _, preds = predict_masks(model, np.stack([s.image for s in data[:4]]), args.threshold)
    report.save_metric_histograms(rep, out / "metrics_hist.png")
    report.save_example_panels(data[:4], preds, out / "examples.png")
    print(f"images evaluated: {len(rep.per_image)}")
    print(f"mean iou:  {rep.mean_iou:.4f}")
    print(f"mean f1:   {rep.mean_f1:.4f}")
    print(f"mean dice: {rep.mean_dice:.4f}")
    print(f"mean hd95: {rep.mean_hd95:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradient_suite(configs_per_layer=args.configs, seed=args.seed or _default_seed())
    worst_name, worst = max(results.items(), key=lambda kv: kv[1])
    ok = True
    for name, err in results.items():
        status = "PASS" if err < args.tol else "FAIL"
        ok &= err < args.tol
        print(f"{status} {name:24s} max rel err {err:.3e}")
    print(f"worst: {worst_name} {worst:.3e} (tolerance {args.tol:g})")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_count(args) -> int:
    widths = tuple(int(w) for w in args.widths.split(",")) if args.widths else (16, 32, 64, 128)
    levels = args.levels if args.levels is not None else len(widths)
    mcfg = ModelConfig(levels=levels, widths=widths, in_channels=args.in_channels,
                       variant="dpconv_recon")
    model = SRSModel(mcfg, seed=0)
    model.eval()
    model.recon_weights_loaded = True
    side = args.size
    shape = (args.in_channels, side, side)

    recon_params = model.recon_encoder.param_count() + model.recon_decoder.param_count()
    recon_flops = count_forward_flops(lambda x: model.recon_forward(x), shape)
    bridge_modules = [model.generator, model.proj_info, model.proj_in, model.proj_out]
    bridge_params = sum(m.param_count() for m in bridge_modules)
    deep = side // mcfg.spatial_factor

    def bridge_forward(x):
        from .dpconv import dpconv_apply, generate_kernel
        kernel = generate_kernel(model.proj_info(x), model.generator)
        return model.proj_out(dpconv_apply(model.proj_in(x), kernel))

    bridge_flops = count_forward_flops(bridge_forward, (widths[-1], deep, deep))
    seg_params = model.seg_encoder.param_count() + model.seg_decoder.param_count()
    pure = SRSModel(ModelConfig(levels=levels, widths=widths, in_channels=args.in_channels,
                                variant="pure_seg"), seed=0)
    pure.eval()
    seg_flops = count_forward_flops(lambda x: pure.seg_forward(x)[0], shape)
    srs_params = seg_params + bridge_params + model.recon_encoder.param_count()
    srs_flops = count_forward_flops(lambda x: model.seg_forward(x)[0], shape)

    rows = [
        ("pure_reconstruction", recon_params, recon_flops),
        ("dpconv_only", bridge_params, bridge_flops),
        ("pure_segmentation", seg_params, seg_flops),
        ("srs", srs_params, srs_flops),
    ]
    print(f"{'configuration':22s} {'params':>12s} {'gflops':>10s}")
    for name, params, flops in rows:
        print(f"{name:22s} {params:12d} {flops / 1e9:10.4f}")
    if args.fps:
        import time

        x = np.zeros((1, *shape), dtype=np.float32)
        from .autodiff import Node, no_grad

        with no_grad():
            model.seg_forward(Node(x))
            t0 = time.perf_counter()
            n = 5
            for _ in range(n):
                model.seg_forward(Node(x))
            dt = (time.perf_counter() - t0) / n
        print(f"fps (cpu, batch 1): {1.0 / dt:.2f}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="srs", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic weak-target dataset")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--size", type=int, default=64, help="square image side (divisible by 8)")
    p.add_argument("--mode", choices=("easy", "hard"), default="easy", help="difficulty")
    p.add_argument("--seed", type=int, default=None, help="seed (fallback: SRS_SEED)")
    p.add_argument("--out", type=str, required=True, help="output dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-recon", help="phase one: reconstruction pretraining")
    p.add_argument("--data", type=str, required=True, help="dataset root (images/, masks/ optional)")
    p.add_argument("--out", type=str, required=True, help="output directory")
    p.add_argument("--epochs", type=int, default=None, help="epochs (default 100)")
    p.add_argument("--recon-mode", choices=("direct", "masked"), default=None,
                   help="direct reconstruction or masked-patch reconstruction")
    p.add_argument("--mask-patch", type=int, default=None, help="masked-mode patch size (default 16)")
    p.add_argument("--mask-ratio", type=float, default=None, help="masked-mode tile ratio (default 0.6)")
    _add_train_flags(p)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train_recon)

    p = sub.add_parser("train-seg", help="phase two: segmentation training")
    p.add_argument("--data", type=str, required=True, help="labeled dataset root")
    p.add_argument("--val-data", type=str, default=None, help="validation dataset root")
    p.add_argument("--out", type=str, required=True, help="output directory")
    p.add_argument("--variant", choices=VARIANTS, default="dpconv_recon", help="model wiring")
    p.add_argument("--phase1-ckpt", type=str, default=None, help="phase-one checkpoint")
    p.add_argument("--no-freeze", action="store_true",
                   help="fine-tune the reconstruction encoder instead of freezing it")
    p.add_argument("--epochs", type=int, default=None, help="epochs (default 300)")
    _add_train_flags(p)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("eval", help="evaluate a segmentation checkpoint")
    p.add_argument("--ckpt", type=str, required=True, help="segmentation checkpoint")
    p.add_argument("--data", type=str, required=True, help="labeled dataset root")
    p.add_argument("--out", type=str, required=True, help="report output directory")
    p.add_argument("--threshold", type=float, default=0.5, help="probability threshold")
    p.add_argument("--resize", type=int, default=None, help="resize samples before evaluation")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    p.add_argument("--configs", type=int, default=20, help="random configurations per layer")
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error tolerance")
    p.add_argument("--seed", type=int, default=None, help="seed (fallback: SRS_SEED)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("count", help="parameter and FLOP accounting table")
    p.add_argument("--widths", type=str, default=None, help="channel widths (default 16,32,64,128)")
    p.add_argument("--levels", type=int, default=None, help="encoder levels")
    p.add_argument("--size", type=int, default=256, help="input side for FLOP accounting")
    p.add_argument("--in-channels", type=int, default=1, help="input channels")
    p.add_argument("--fps", action="store_true", help="also time single-image inference")
    p.set_defaults(func=cmd_count)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except (EngineError, OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"srs: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
