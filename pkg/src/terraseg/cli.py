"""Command-line entry point: train, eval, infer, bench, dataset validate, synth."""

from __future__ import annotations

import argparse
import json
import platform
import statistics
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig
from .data import (
    ClassSet,
    DatasetManifest,
    ManifestEntry,
    Normalization,
    load_frame,
    load_manifest,
    normalize,
    split_dataset,
    validate_dataset,
)
from .errors import ConfigurationError, DataError, ShapeError, TrainingError, UsageError
from .metrics import render_table
from .model import SegmentationModel
from .synthetic import generate_synthetic_dataset
from .trainer import TrainConfig, dataset_loss, evaluate, train


def _load_run_config(path: str | None) -> dict:
    config = {"model": ModelConfig().to_dict(), "train": TrainConfig().to_dict(), "manifest": None}
    if path is None:
        return config
    file = Path(path)
    if not file.exists():
        raise ConfigurationError(f"config file not found: {file}")
    with file.open() as fh:
        loaded = json.load(fh)
    for section in ("model", "train"):
        config[section].update(loaded.get(section, {}))
    if "manifest" in loaded:
        config["manifest"] = loaded["manifest"]
    return config


def _apply_set_overrides(config: dict, assignments: list[str]) -> None:
    for assignment in assignments:
        if "=" not in assignment:
            raise ConfigurationError(f"--set expects dotted.key=value, got {assignment!r}")
        dotted, raw = assignment.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = config
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n")


def _load_model(checkpoint: str) -> tuple:
    cfg, state, metadata = load_checkpoint(checkpoint)
    model = SegmentationModel(cfg, seed=0)
    model.load_state_dict(state)
    return model, metadata


def _select_split(manifest: DatasetManifest, which: str, ratio: float, seed: int) -> list:
    labeled = manifest.labeled_entries()
    if which == "all":
        return labeled
    train_entries, val_entries = split_dataset(labeled, ratio, seed)
    return train_entries if which == "train" else val_entries


def cmd_train(args: argparse.Namespace) -> int:
    config = _load_run_config(args.config)
    if args.manifest:
        config["manifest"] = args.manifest
    for key, value in (("epochs", args.epochs), ("batch_size", args.batch_size),
                       ("learning_rate", args.lr), ("seed", args.seed)):
        if value is not None:
            config["train"][key] = value
    _apply_set_overrides(config, args.set or [])

    if not config["manifest"]:
        raise ConfigurationError("no dataset manifest given (config 'manifest' or --manifest)")
    out_dir = Path(args.out)
    config["train"]["checkpoint_dir"] = str(out_dir)

    manifest = load_manifest(config["manifest"])
    model_cfg = ModelConfig.from_dict(config["model"])
    train_cfg = TrainConfig.from_dict(config["train"])
    if model_cfg.num_classes != len(manifest.class_set):
        raise ConfigurationError(
            f"model has {model_cfg.num_classes} classes but manifest defines {len(manifest.class_set)}")

    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "resolved_config.json", config)

    model = SegmentationModel(model_cfg, seed=train_cfg.seed)
    best_path, train_log = train(model, manifest, train_cfg)
    train_log.save(out_dir / "trainlog.jsonl")

    # infer needs the dataset constants; attach them to the retained checkpoints
    for name in ("best.ckpt", "last.ckpt"):
        ckpt = out_dir / name
        cfg, state, metadata = load_checkpoint(ckpt)
        metadata["class_set"] = manifest.class_set.to_dict()
        metadata["normalization"] = manifest.normalization.to_dict()
        save_checkpoint(ckpt, cfg, state, metadata)

    best = train_log.records[train_log.best_epoch]
    print(f"training done: {train_cfg.epochs} epochs, best val loss {best.val_loss:.6f} "
          f"at epoch {best.epoch}; checkpoints in {out_dir}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model, _ = _load_model(args.checkpoint)
    manifest = load_manifest(args.manifest)
    if model.cfg.num_classes != len(manifest.class_set):
        raise ConfigurationError("checkpoint class count does not match manifest class set")
    entries = _select_split(manifest, args.split, args.split_ratio, args.seed)
    if not entries:
        raise DataError(f"split {args.split!r} selected no labeled entries")
    ablate = tuple(args.ablate_channels or ())
    report = evaluate(model, entries, manifest, ablate_channels=ablate,
                      tn_inclusive_pa=args.tn_inclusive_pa, ignore_void_pixels=args.ignore_void)
    loss = dataset_loss(model, entries, manifest, ablate_channels=ablate)
    table = render_table(report)
    print(table)
    print(f"\ncomposite loss: {loss:.6f}  ({len(entries)} frames, split={args.split})")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.txt").write_text(table + "\n")
    payload = report.to_dict()
    payload["loss"] = loss
    payload["split"] = args.split
    payload["frames"] = len(entries)
    _write_json(out_dir / "metrics.json", payload)
    _write_json(out_dir / "eval_config.json", {
        "checkpoint": args.checkpoint, "manifest": args.manifest, "split": args.split,
        "split_ratio": args.split_ratio, "seed": args.seed, "ablate_channels": list(ablate),
        "tn_inclusive_pa": args.tn_inclusive_pa, "ignore_void": args.ignore_void,
        "model": model.cfg.to_dict(),
    })
    return 0


def _manifest_shell(metadata: dict) -> DatasetManifest:
    if "class_set" not in metadata or "normalization" not in metadata:
        raise DataError("checkpoint carries no dataset constants; re-save it via training or pass them explicitly")
    return DatasetManifest(
        entries=[],
        class_set=ClassSet.from_dict(metadata["class_set"]),
        normalization=Normalization.from_dict(metadata["normalization"]),
        root=Path("."),
    )


def cmd_infer(args: argparse.Namespace) -> int:
    model, metadata = _load_model(args.checkpoint)
    shell = _manifest_shell(metadata)
    entry = ManifestEntry(id=args.id, rgb_path=args.rgb, depth_path=args.depth, thermal_path=args.thermal)
    frame = load_frame(entry, shell)
    inputs = normalize(frame, shell)[None]
    mask = model.predict(inputs)[0]

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    palette = np.asarray(shell.class_set.palette, dtype=np.uint8)
    mask_img = Image.fromarray(mask.astype(np.uint8), mode="P")
    flat = palette.reshape(-1).tolist()
    mask_img.putpalette(flat + [0] * (768 - len(flat)))
    mask_path = out_dir / f"{args.id}_mask.png"
    mask_img.save(mask_path)

    overlay = (0.5 * frame.rgb * 255.0 + 0.5 * palette[mask]).round().astype(np.uint8)
    overlay_path = out_dir / f"{args.id}_overlay.png"
    Image.fromarray(overlay).save(overlay_path)

    _write_json(out_dir / f"{args.id}_infer_config.json", {
        "checkpoint": args.checkpoint, "rgb": args.rgb, "depth": args.depth,
        "thermal": args.thermal, "model": model.cfg.to_dict(),
    })
    print(f"wrote {mask_path} and {overlay_path} ({mask.shape[1]}x{mask.shape[0]})")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    if args.n < 1:
        raise ConfigurationError(f"bench needs at least one sample, got n={args.n}")
    model, _ = _load_model(args.checkpoint)
    manifest = load_manifest(args.manifest)
    if not manifest.entries:
        raise DataError("manifest has no entries to benchmark on")
    frames = [normalize(load_frame(e, manifest), manifest)[None]
              for e in manifest.entries[: max(1, min(len(manifest.entries), 8))]]
    for i in range(args.warmup):
        model.predict(frames[i % len(frames)])
    samples_ms = []
    for i in range(args.n):
        start = time.perf_counter()
        model.predict(frames[i % len(frames)])
        samples_ms.append(1000.0 * (time.perf_counter() - start))
    report = {
        "samples": args.n,
        "warmup": args.warmup,
        "mean_ms": statistics.fmean(samples_ms),
        "median_ms": statistics.median(samples_ms),
        "p95_ms": float(np.percentile(samples_ms, 95)),
        "min_ms": min(samples_ms),
        "max_ms": max(samples_ms),
        "input_extents": list(frames[0].shape[2:]),
        "hardware": {
            "platform": platform.platform(),
            "processor": platform.processor() or platform.machine(),
            "python": platform.python_version(),
        },
        "model": model.cfg.to_dict(),
    }
    out_dir = Path(args.out)
    _write_json(out_dir / "bench.json", report)
    print(f"forward latency over {args.n} runs ({args.warmup} warmup): "
          f"mean {report['mean_ms']:.1f} ms, median {report['median_ms']:.1f} ms, "
          f"p95 {report['p95_ms']:.1f} ms on {report['hardware']['processor']}")
    return 0


def cmd_dataset_validate(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.manifest)
    summary = validate_dataset(manifest)
    print(f"manifest ok: {summary['entries']} entries ({summary['labeled']} labeled)")
    total = sum(summary["class_pixels"].values()) or 1
    for name, count in summary["class_pixels"].items():
        print(f"  {name:>12}: {count:>10d} px ({100.0 * count / total:.2f} %)")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    manifest_path = generate_synthetic_dataset(args.out, n_frames=args.frames, size=args.size)
    print(f"wrote synthetic dataset: {manifest_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="terraseg",
                                     description="Multimodal RGB-D-T terrain segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config and manifest")
    p.add_argument("--config", help="JSON run config (model/train/manifest sections)")
    p.add_argument("--manifest", help="dataset manifest path (overrides config)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any dotted config key, e.g. model.embed_dim=64")
    p.add_argument("--out", default="runs/train", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("all", "train", "val"), default="all")
    p.add_argument("--split-ratio", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ablate-channels", type=int, nargs="*", metavar="C",
                   help="zero these input channels before inference")
    p.add_argument("--tn-inclusive-pa", action="store_true",
                   help="report per-class PA as (TP+TN)/total instead of recall")
    p.add_argument("--ignore-void", action="store_true",
                   help="drop void ground-truth pixels from the total accuracy as well")
    p.add_argument("--out", default="runs/eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="segment one RGB-D-T frame")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rgb", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--thermal", required=True)
    p.add_argument("--id", default="frame")
    p.add_argument("--out", default="runs/infer")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="single-frame forward latency")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("-n", type=int, default=10)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--out", default="runs/bench")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("dataset", help="dataset utilities")
    dataset_sub = p.add_subparsers(dest="dataset_command", required=True)
    v = dataset_sub.add_parser("validate", help="check every manifest invariant")
    v.add_argument("--manifest", required=True)
    v.set_defaults(func=cmd_dataset_validate)

    p = sub.add_parser("synth", help="generate the bundled synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, DataError, ShapeError, TrainingError, UsageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
