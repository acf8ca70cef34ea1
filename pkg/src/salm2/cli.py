"""Command line: train, eval, predict, overlay, count-params, gen-synthetic."""
from __future__ import annotations

import argparse
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import data, metrics
from .errors import (AdapterUnavailableError, CheckpointVersionError, ConfigError, ContractError,
                     CorruptCheckpointError, TrainingDivergedError)
from .fileio import atomic_write_bytes, atomic_write_json
from .model import (REFERENCE_BACKBONE_PARAMS, REFERENCE_FLOPS_G, REFERENCE_TOTAL_PARAMS, ModelConfig, SalM2,
                    count_trainable_params, estimate_flops, load_checkpoint, param_breakdown,
                    save_checkpoint)
from .semantic import select_provider

log = logging.getLogger("salm2")

CHECKPOINT_NAME = "checkpoint.zip"


def _png(arr: np.ndarray, mode: str) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def predict_frame(model: SalM2, frame: np.ndarray) -> np.ndarray:
    """Saliency in [0, 1] at the frame's own resolution."""
    x = data.preprocess(frame, model.config.input_size).unsqueeze(0)
    model.eval()
    with torch.no_grad():
        sal = model(x)[0, 0]
    h, w = frame.shape[:2]
    if (h, w) != tuple(sal.shape):
        sal = torch.nn.functional.interpolate(sal[None, None], size=(h, w), mode="bilinear",
                                              align_corners=False)[0, 0]
    return sal.clamp(0, 1).numpy()


def _load_config(path) -> ModelConfig:
    if path is None:
        return ModelConfig()
    with open(path, encoding="utf-8") as fh:
        return ModelConfig.from_dict(json.load(fh))


def cmd_gen_synthetic(args):
    manifest = data.generate_synthetic(args.n, args.seed, args.out, split=args.split, sigma=args.sigma)
    print(f"wrote {len(manifest.ids)} samples to {Path(args.out) / args.split}")


def cmd_train(args):
    from .plotting import plot_history
    from .training import TrainConfig, train

    torch.set_num_threads(1)
    provider, weights = select_provider(args.clip_weights)
    cfg = _load_config(args.config)
    cfg.semantic_provider = provider
    cfg.seed = args.seed
    model = SalM2(cfg, clip_weights=weights)
    train_set = data.load_dataset(args.data, args.split)
    val_set = None
    if args.val_split and (Path(args.data) / args.val_split).is_dir():
        val_set = data.load_dataset(args.data, args.val_split)
    tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, seed=args.seed)
    result = train(model, train_set, tcfg, val_dataset=val_set)
    model.load_state_dict(result.best_state)
    out = Path(args.out)
    best = result.history[result.best_epoch]
    save_checkpoint(model, out / CHECKPOINT_NAME, step=result.steps,
                    metrics={"epoch": best["epoch"], "loss": best["loss"], "cc": best["cc"]})
    atomic_write_json(out / "history.json", {"train_config": result.config, "best_epoch": result.best_epoch,
                                             "history": result.history})
    plot_history(result.history, out / "history.png")
    print(f"best epoch {result.best_epoch}: loss {best['loss']:.5f} cc {best['cc']:.4f}")
    print(f"checkpoint: {out / CHECKPOINT_NAME}")


def cmd_eval(args):
    from .plotting import plot_metrics
    from .training import validate

    model = load_checkpoint(args.ckpt, clip_weights=args.clip_weights)
    dataset = data.load_dataset(args.data, args.split)
    mcfg = metrics.MetricConfig(metrics=metrics.parse_metric_names(args.metrics), borji_seed=args.seed)
    report = validate(model, dataset, mcfg).to_dict()
    out = Path(args.out) if args.out else Path(args.ckpt).resolve().parent
    atomic_write_json(out / "metrics.json", report)
    plot_metrics(report, out / "metrics.png")
    print(json.dumps({k: report[k] for k in metrics.METRIC_NAMES if k in report}))
    if report["unavailable"]:
        print(f"unavailable (no fixation maps): {', '.join(report['unavailable'])}")


def cmd_predict(args):
    model = load_checkpoint(args.ckpt, clip_weights=args.clip_weights)
    sal = predict_frame(model, data.read_frame(args.image))
    atomic_write_bytes(args.out, _png(data.to_uint8(sal), "L"))


def cmd_overlay(args):
    from .plotting import overlay

    model = load_checkpoint(args.ckpt, clip_weights=args.clip_weights)
    frame = data.read_frame(args.image)
    sal = predict_frame(model, frame)
    atomic_write_bytes(args.out, _png(overlay(frame, sal), "RGB"))


def cmd_count_params(args):
    model = SalM2(_load_config(args.config))
    parts = param_breakdown(model)
    total = count_trainable_params(model)
    print(f"trainable parameters: {total}")
    for name, n in parts.items():
        if name != "total":
            print(f"  {name:<18}{n:>8}")
    print(f"reference: backbone {REFERENCE_BACKBONE_PARAMS}, total ~{REFERENCE_TOTAL_PARAMS}")
    for size in (256, 512):
        flops = estimate_flops(model, size)
        print(f"FLOPs @ {size}x{size}: {flops} ({flops / 1e9:.4f} G; reference {REFERENCE_FLOPS_G[size]} G)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="salm2", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on ROOT/<split>, write checkpoint + history")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--clip-weights")
    p.add_argument("--config", help="JSON model config")
    p.add_argument("--split", default="train")
    p.add_argument("--val-split", default="val", help="validation split, used when present")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint, write metrics.json")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--metrics", default="all")
    p.add_argument("--split", default="train")
    p.add_argument("--out", help="output directory (default: checkpoint directory)")
    p.add_argument("--seed", type=int, default=metrics.BORJI_SEED, help="AUC_Borji sampling seed")
    p.add_argument("--clip-weights")
    p.set_defaults(func=cmd_eval)

    for name, func, text in (("predict", cmd_predict, "write an 8-bit grayscale saliency map"),
                             ("overlay", cmd_overlay, "write the saliency heat map blended on the frame")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--image", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--clip-weights")
        p.set_defaults(func=func)

    p = sub.add_parser("count-params", help="trainable parameters and FLOP estimates")
    p.add_argument("--config", help="JSON model config (default configuration if omitted)")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("gen-synthetic", help="write a synthetic dataset tree")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--sigma", type=float, default=data.DEFAULT_SIGMA)
    p.set_defaults(func=cmd_gen_synthetic)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (OSError, data.DatasetError, CorruptCheckpointError, CheckpointVersionError, ConfigError,
            ContractError, AdapterUnavailableError, TrainingDivergedError, ValueError) as exc:
        print(f"salm2 {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
