"""Command-line surface: dataset creation, training, segmentation, redraw
panels, and evaluation.

Runs are driven by a declarative TOML config (``--config`` or the
REDO_CONFIG environment variable) with sections mirroring the library's
dataclasses; unknown keys are rejected and referenced paths are checked
before any network is allocated. Exit codes: 0 success, 1 usage/config
error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .composition import SceneConfig
from .networks import NetworkConfig
from .objectives import LossWeights, lambda_z_value
from .training import RestartPolicy, TrainConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# declarative run configuration
# ---------------------------------------------------------------------------

_SCENE_KEYS = {"n", "size", "width", "height", "channels", "latent_dim"}
_NETWORK_KEYS = {"ch_f", "ch_g", "ch_d"}
_TRAIN_KEYS = {"batch_size", "max_steps", "lr_f", "lr_gdd", "adam_beta1",
               "adam_beta2", "adam_eps", "weight_decay_f", "seed",
               "checkpoint_every", "eval_every", "panel_every", "target_val_iou"}
_RESTART_KEYS = {"max_restarts", "collapse_epsilon", "collapse_patience",
                 "probe_window"}
_LOSS_KEYS = {"preset", "lambda_z"}
_DATA_KEYS = {"root"}
_OUTPUT_KEYS = {"dir"}
_SECTIONS = {"scene": _SCENE_KEYS, "network": _NETWORK_KEYS, "train": _TRAIN_KEYS,
             "restart": _RESTART_KEYS, "loss": _LOSS_KEYS, "data": _DATA_KEYS,
             "output": _OUTPUT_KEYS}


@dataclass
class RunConfig:
    network: NetworkConfig
    train: TrainConfig
    weights: LossWeights
    data_root: Path
    out_dir: Path
    raw: dict = field(default_factory=dict)


def _check_keys(section: str, table: dict) -> None:
    allowed = _SECTIONS[section]
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f"[{section}] has unknown keys: {', '.join(unknown)}")


def load_run_config(path, seed_override: int | None = None,
                    out_override: str | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "rb") as f:
        raw = tomllib.load(f)
    unknown_sections = sorted(set(raw) - set(_SECTIONS))
    if unknown_sections:
        raise ConfigError(f"unknown config sections: {', '.join(unknown_sections)}")
    for section in raw:
        _check_keys(section, raw[section])

    scene_tbl = dict(raw.get("scene", {}))
    size = scene_tbl.pop("size", None)
    if size is not None:
        scene_tbl.setdefault("width", size)
        scene_tbl.setdefault("height", size)
    try:
        scene = SceneConfig(**scene_tbl)
        network = NetworkConfig(scene=scene, **raw.get("network", {}))
        restart = RestartPolicy(**raw.get("restart", {}))
        train_tbl = dict(raw.get("train", {}))
        if seed_override is not None:
            train_tbl["seed"] = seed_override
        train = TrainConfig(restart=restart, **train_tbl)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    loss_tbl = raw.get("loss", {})
    if "lambda_z" in loss_tbl:
        weights = LossWeights(lambda_z=float(loss_tbl["lambda_z"]))
    else:
        preset = loss_tbl.get("preset", "default")
        weights = LossWeights(
            lambda_z=lambda_z_value(scene.n, scene.latent_dim, preset))

    data_tbl = raw.get("data", {})
    if "root" not in data_tbl:
        raise ConfigError("[data] section must set root")
    data_root = Path(data_tbl["root"])
    if not data_root.exists():
        raise ConfigError(f"dataset path does not exist: {data_root}")
    if not (data_root / "manifest.csv").exists():
        raise ConfigError(f"dataset path has no manifest.csv: {data_root}")

    out_tbl = raw.get("output", {})
    out_dir = Path(out_override or out_tbl.get("dir", "runs/run"))
    return RunConfig(network=network, train=train, weights=weights,
                     data_root=data_root, out_dir=out_dir, raw=raw)


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _load_single_image(path, size: int) -> np.ndarray:
    from .data import load_image_folder
    path = Path(path)
    if path.is_dir():
        raise ConfigError(f"{path} is a directory, expected an image file")
    examples = load_image_folder(path.parent, size)
    for ex in examples:
        if ex.id == path.stem:
            return ex.image
    raise ConfigError(f"could not load image {path}")


def _split_examples(root, size, split_name):
    from .data import load_exported_dataset
    examples, split = load_exported_dataset(root, size=size)
    wanted = set(split.part(split_name))
    return [ex for ex in examples if ex.id in wanted]


def _write_panels(trainer, step):
    import torch

    from .viz import mask_to_rgb, save_grid

    models = trainer.state.models
    cfg = models.config
    n = cfg.scene.n
    was_training = models.mask_net.training
    models.eval()
    rng = torch.Generator().manual_seed(trainer.train_config.seed + step)
    count = min(4, trainer.images.shape[0])
    tiles = []
    with torch.no_grad():
        batch = trainer.images[:count]
        masks = models.mask_net(batch)
        for b in range(count):
            row = [batch[b].numpy()]
            for k in range(n - 1):
                row.append(mask_to_rgb(masks[b, k].numpy()))
            for region in range(1, n + 1):
                z = torch.randn((1, cfg.scene.latent_dim), generator=rng)
                appearance = models.generators(masks[b:b + 1, region - 1:region],
                                               z, region)
                from .composition import redraw_one
                redrawn = redraw_one(batch[b:b + 1], masks[b:b + 1], appearance, region)
                row.append(redrawn[0].numpy())
            tiles.extend(row)
    if was_training:
        models.train()
    panel_dir = trainer.out_dir / "panels"
    panel_dir.mkdir(exist_ok=True)
    save_grid(panel_dir / f"step_{step:07d}.png", tiles, cols=1 + (n - 1) + n)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_make_dataset(args) -> int:
    from .data import (load_idx_images, load_idx_labels, make_blob_toy,
                       make_colored_2mnist, export_dataset, split_dataset)

    out_dir = Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        print(f"error: output directory not writable: {exc}", file=sys.stderr)
        return EXIT_USAGE

    rng = np.random.default_rng(args.seed)
    if args.kind == "blobs":
        examples = make_blob_toy(args.count, args.size, rng)
    else:
        if not args.mnist_images or not args.mnist_labels:
            print("error: c2mnist needs --mnist-images and --mnist-labels IDX files",
                  file=sys.stderr)
            return EXIT_USAGE
        glyphs = load_idx_images(args.mnist_images)
        labels = load_idx_labels(args.mnist_labels)
        examples = make_colored_2mnist(args.count, args.size, rng, glyphs, labels)
    split = split_dataset(examples, fractions=(0.8, 0.1, 0.1),
                          rng=np.random.default_rng(args.seed + 1))
    export_dataset(examples, out_dir, split=split)
    print(f"wrote {len(examples)} examples to {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    config_path = args.config or os.environ.get("REDO_CONFIG")
    if not config_path:
        print("error: no config (use --config or REDO_CONFIG)", file=sys.stderr)
        return EXIT_USAGE
    try:
        run = load_run_config(config_path, seed_override=args.seed,
                              out_override=args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    import torch

    from .data import load_exported_dataset
    from .training import Trainer, TrainingFailedError

    examples, split = load_exported_dataset(run.data_root,
                                            size=run.network.image_size)
    by_id = {ex.id: ex for ex in examples}
    train_ids = split.train or [ex.id for ex in examples]
    train_images = torch.from_numpy(
        np.stack([by_id[i].image for i in train_ids]))
    val_examples = [by_id[i] for i in split.val if by_id[i].gt_masks is not None]

    run.out_dir.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(run.network, run.train, run.weights, train_images,
                      val_examples=val_examples, out_dir=run.out_dir,
                      panel_fn=_write_panels if run.train.panel_every else None)
    try:
        outcome = trainer.run()
    except TrainingFailedError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"finished {outcome.steps_run} steps, restarts={outcome.restarts}")
    if outcome.best_checkpoint:
        print(f"best checkpoint: {outcome.best_checkpoint} "
              f"(val IoU {outcome.best_val_iou:.4f} at step {outcome.best_step})")
    return EXIT_OK


def cmd_segment(args) -> int:
    import torch
    from PIL import Image as PILImage

    from .data import load_image_folder
    from .training import load_model_checkpoint

    models, _ = load_model_checkpoint(args.checkpoint)
    size = models.config.image_size
    if args.size is not None and args.size != size:
        print(f"error: requested size {args.size} but checkpoint was trained "
              f"at {size}", file=sys.stderr)
        return EXIT_USAGE
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    examples = load_image_folder(args.input_dir, size)
    if not examples:
        print(f"error: no readable images in {args.input_dir}", file=sys.stderr)
        return EXIT_USAGE
    with torch.no_grad():
        for ex in examples:
            masks = models.mask_net(torch.from_numpy(ex.image[None]))[0].numpy()
            labels = np.argmax(masks, axis=0).astype(np.uint8)
            PILImage.fromarray(labels, mode="L").save(out_dir / f"{ex.id}_mask.png")
            if args.soft:
                for k in range(masks.shape[0]):
                    gray = np.round(np.clip(masks[k], 0, 1) * 255).astype(np.uint8)
                    PILImage.fromarray(gray, mode="L").save(
                        out_dir / f"{ex.id}_soft_{k + 1}.png")
    print(f"segmented {len(examples)} images into {out_dir}")
    return EXIT_OK


def cmd_redraw(args) -> int:
    import torch

    from .composition import redraw_one
    from .training import load_model_checkpoint, sample_latent
    from .viz import mask_to_rgb, save_grid

    models, _ = load_model_checkpoint(args.checkpoint)
    cfg = models.config
    n = cfg.scene.n
    if not 1 <= args.region <= n:
        print(f"error: region {args.region} outside 1..{n}", file=sys.stderr)
        return EXIT_USAGE
    try:
        image = _load_single_image(args.input, cfg.image_size)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    rng = torch.Generator().manual_seed(args.seed)
    x = torch.from_numpy(image[None])
    tiles = [image]
    with torch.no_grad():
        masks = models.mask_net(x)
        tiles.append(mask_to_rgb(masks[0, args.region - 1].numpy()))
        for _ in range(args.count):
            z = sample_latent(cfg.scene.latent_dim, rng, 1)
            appearance = models.generators(masks[:, args.region - 1:args.region],
                                           z, args.region)
            tiles.append(redraw_one(x, masks, appearance, args.region)[0].numpy())
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_grid(out_path, tiles, cols=len(tiles))
    print(f"wrote {out_path} ({len(tiles)} tiles)")
    return EXIT_OK


def cmd_eval(args) -> int:
    import torch

    from .evaluation import best_permutation_match, intersection_over_union, pixel_accuracy
    from .training import load_model_checkpoint

    models, _ = load_model_checkpoint(args.checkpoint)
    examples = _split_examples(args.data_dir, models.config.image_size, args.split)
    examples = [ex for ex in examples if ex.gt_masks is not None]
    if not examples:
        print(f"error: split {args.split!r} has no ground-truth masks",
              file=sys.stderr)
        return EXIT_USAGE
    preds = []
    with torch.no_grad():
        for ex in examples:
            preds.append(models.mask_net(torch.from_numpy(ex.image[None]))[0].numpy())
    from .evaluation import binarize_masks
    result = best_permutation_match(preds, [ex.gt_masks for ex in examples],
                                    level=args.level)
    perm_str = "|".join(f"{k + 1}->{g}" for k, g in enumerate(result.permutation))

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = out_dir / "eval_report.csv"
    with open(report, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "acc", "iou", "permutation"])
        for ex, pred in zip(examples, preds):
            hard = binarize_masks(pred)
            if args.level == "image":
                row = best_permutation_match([pred], [ex.gt_masks], level="dataset")
                acc, iou = row.acc, row.iou
                row_perm = "|".join(f"{k + 1}->{g}"
                                    for k, g in enumerate(row.permutation))
            else:
                acc = pixel_accuracy(hard, ex.gt_masks, result.permutation)
                iou, _ = intersection_over_union(hard, ex.gt_masks, result.permutation)
                row_perm = perm_str
            writer.writerow([ex.id, f"{acc:.6f}", f"{iou:.6f}", row_perm])
        writer.writerow(["__summary__", f"{result.acc:.6f}", f"{result.iou:.6f}",
                         perm_str])
    print(f"split={args.split} level={args.level} n={len(examples)}")
    print(f"Acc {result.acc:.4f}  IoU {result.iou:.4f}  permutation {perm_str}")
    print(f"report: {report}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="redo",
        description="Learn object segmentation masks by redrawing image regions.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="synthesize a toy dataset tree")
    p.add_argument("kind", choices=["blobs", "c2mnist"])
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--mnist-images", help="IDX image file for c2mnist glyphs")
    p.add_argument("--mnist-labels", help="IDX label file for c2mnist glyphs")
    p.set_defaults(fn=cmd_make_dataset)

    p = sub.add_parser("train", help="run adversarial training from a config")
    p.add_argument("--config", help="TOML run config (or set REDO_CONFIG)")
    p.add_argument("--seed", type=int, help="override [train].seed")
    p.add_argument("--out", help="override [output].dir")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("segment", help="write hard masks for a folder of images")
    p.add_argument("checkpoint")
    p.add_argument("input_dir")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, help="must match the checkpoint size")
    p.add_argument("--soft", action="store_true", help="also write soft masks")
    p.set_defaults(fn=cmd_segment)

    p = sub.add_parser("redraw", help="redraw one region of an image several times")
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("--region", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_redraw)

    p = sub.add_parser("eval", help="score a checkpoint against ground truth")
    p.add_argument("checkpoint")
    p.add_argument("data_dir")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--level", default="dataset", choices=["dataset", "image"])
    p.add_argument("--out", default=".")
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
