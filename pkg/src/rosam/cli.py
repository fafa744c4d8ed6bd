"""Command-line entry points: train, infer, eval, convert."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import click
import numpy as np
from PIL import Image

from .config import InferenceConfig, ModelConfig, RunConfig, TrainConfig
from .data import load_dataset, tight_bbox
from .errors import CheckpointError, ConfigurationError, IngestionError, RosamError
from .infer import merge_instance_masks, segment_objects, write_results
from .lora import inject_lora
from .metrics import evaluate
from .model import BoxPrompt, build_model
from .training import (NonFiniteLossError, load_checkpoint, state_from_checkpoint,
                       train)

logger = logging.getLogger("rosam")

EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _setup_logging() -> None:
    level = os.environ.get("ROSAM_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")


@click.group()
def main() -> None:
    """LoRA-adapted promptable segmentation: training, tiled inference, and
    boundary-aware evaluation."""
    _setup_logging()


def _load_run_config(config_path: str | None, overrides: dict) -> RunConfig:
    try:
        if config_path is not None:
            return RunConfig.load(config_path, overrides)
        return RunConfig.from_dict({}, overrides)
    except ConfigurationError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_CONFIG)


@main.command("train")
@click.option("--config", "config_path", type=click.Path(), help="JSON run config.")
@click.option("--dataset", "dataset_root", type=click.Path(), default=None)
@click.option("--run-dir", type=click.Path(), default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--resume", "resume_from", type=click.Path(), default=None)
@click.option("--jobs", type=int, default=1, help="Worker count (output is identical for any value).")
def cmd_train(config_path, dataset_root, run_dir, epochs, seed, resume_from, jobs) -> None:
    """Run the alternating-optimization training loop."""
    overrides = {}
    if epochs is not None:
        overrides["train.epochs"] = epochs
    if seed is not None:
        overrides["train.seed"] = seed
        overrides["model.seed"] = seed
    if dataset_root is not None:
        overrides["dataset_root"] = dataset_root
    if run_dir is not None:
        overrides["run_dir"] = run_dir
    cfg = _load_run_config(config_path, overrides)
    if cfg.dataset_root is None or cfg.run_dir is None:
        click.echo("error: dataset_root and run_dir are required", err=True)
        sys.exit(EXIT_CONFIG)
    try:
        dataset = load_dataset(cfg.dataset_root)
    except (IngestionError, OSError) as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    if not dataset:
        click.echo(f"error: dataset at {cfg.dataset_root} is empty", err=True)
        sys.exit(EXIT_CONFIG)

    run_path = Path(cfg.run_dir)
    run_path.mkdir(parents=True, exist_ok=True)
    cfg.dump(run_path / "config.json")
    state = build_model(cfg.model)
    inject_lora(state, cfg.model.lora_rank)
    try:
        final, history = train(state, dataset, cfg.train, run_dir=run_path,
                               resume_from=resume_from)
    except NonFiniteLossError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_DIVERGED)
    if history:
        click.echo(f"trained {final.step} steps; final loss {history[-1].total:.4f}")
    else:
        click.echo("epochs = 0: checkpoint equals initialization")
    click.echo(f"checkpoint: {run_path / 'final.ckpt'}")


def _load_boxes_file(path: str) -> list[dict]:
    try:
        entries = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"cannot read boxes file {path}: {e}") from e
    if not isinstance(entries, list):
        raise ConfigurationError(f"boxes file {path} must be a JSON list")
    return entries


def _save_overlay(out_dir: Path, image: np.ndarray, results, head: str,
                  stem: str) -> None:
    overlay = image.astype(np.float32) * 0.5
    color = np.array([255.0, 48.0, 48.0], dtype=np.float32)
    for r in results:
        m = r.mask.as_bool()
        overlay[m] = overlay[m] * 0.4 + color * 0.6
    Image.fromarray(overlay.clip(0, 255).astype(np.uint8)).save(
        out_dir / f"{stem}_{head}_overlay.png")


@main.command("infer")
@click.option("--ckpt", required=True, type=click.Path())
@click.option("--boxes", "boxes_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--head", type=click.Choice(["sam", "hq"]), default="hq")
@click.option("--rate", type=click.Choice(["1", "2", "4"]), default="2")
@click.option("--interp", type=click.Choice(["bilinear", "bicubic"]), default="bicubic")
@click.option("--single/--multi", "single", default=True)
@click.option("--save-overlays", is_flag=True, default=False)
@click.option("--jobs", type=int, default=1)
def cmd_infer(ckpt, boxes_path, out_dir, head, rate, interp, single, save_overlays,
              jobs) -> None:
    """Segment box-prompted objects with the tiled inference pipeline."""
    try:
        state = state_from_checkpoint(load_checkpoint(ckpt))
        entries = _load_boxes_file(boxes_path)
        rate = int(rate)
        icfg = InferenceConfig(window_size=state.config.canvas_size // rate,
                               sampling_rate=rate, interpolation=interp,
                               single_object=single)
        icfg.validate_for_model(state.config)
    except (CheckpointError, ConfigurationError) as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_CONFIG)

    images = []
    boxes_root = Path(boxes_path).parent
    for entry in entries:
        image_path = Path(entry["image"])
        if not image_path.is_file():
            image_path = boxes_root / entry["image"]
        if not image_path.is_file():
            click.echo(f"error: unreadable image {entry['image']}", err=True)
            sys.exit(EXIT_CONFIG)
        boxes = [BoxPrompt(*map(float, b)) for b in entry["boxes"]]
        images.append((image_path, boxes))

    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)
    echo = {"ckpt": str(ckpt), "head": head,
            "infer": dataclasses.asdict(icfg), "model": dataclasses.asdict(state.config)}
    (out_path / "effective_config.json").write_text(
        json.dumps(echo, indent=2, sort_keys=True) + "\n")
    total = 0
    for image_path, boxes in images:
        image = np.asarray(Image.open(image_path).convert("RGB"))
        results = segment_objects(state, image, boxes, icfg, head=head)
        write_results(out_path, image_path, results, head)
        if save_overlays:
            _save_overlay(out_path, image, results, head, image_path.stem)
        total += len(results)
    click.echo(f"wrote {total} masks to {out_path}")


@main.command("eval")
@click.option("--pred", "pred_dir", required=True, type=click.Path())
@click.option("--dataset", "dataset_root", required=True, type=click.Path())
@click.option("--d", "boundary_d", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
def cmd_eval(pred_dir, dataset_root, boundary_d, out_dir) -> None:
    """Score predictions with IoU and Boundary IoU."""
    try:
        records = load_dataset(dataset_root)
    except IngestionError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    pred_path = Path(pred_dir)
    results_file = pred_path / "results.json"
    if not results_file.is_file():
        click.echo(f"error: no results.json in {pred_dir}", err=True)
        sys.exit(EXIT_CONFIG)
    by_stem = {Path(r.image_path).stem: r for r in records}
    predictions = {}
    for entry in json.loads(results_file.read_text()):
        record = by_stem.get(Path(entry["image"]).stem)
        if record is None:
            continue
        for obj in entry["objects"]:
            mask = np.asarray(Image.open(pred_path / obj["mask"]).convert("L")) > 127
            predictions[(record.image_path, obj["index"])] = mask
    if not predictions:
        click.echo("error: no predictions overlap the dataset", err=True)
        sys.exit(EXIT_CONFIG)
    report = evaluate(predictions, records, d=boundary_d)
    report.write(Path(out_dir) if out_dir else pred_path)
    click.echo(f"d = {report.d}, n = {len(report.rows)} ({report.aggregation})")
    click.echo(f"mean IoU  {report.mean_iou:.3f}")
    click.echo(f"mean BIoU {report.mean_biou:.3f}")


@main.command("convert")
@click.option("--tracking", "tracking_root", required=True, type=click.Path())
@click.option("--ckpt", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--head", type=click.Choice(["sam", "hq"]), default="hq")
@click.option("--rate", type=click.Choice(["1", "2", "4"]), default="2")
@click.option("--jobs", type=int, default=1)
def cmd_convert(tracking_root, ckpt, out_dir, head, rate, jobs) -> None:
    """Turn tracking boxes into a segmentation dataset (annotation schema)."""
    try:
        state = state_from_checkpoint(load_checkpoint(ckpt))
        records = load_dataset(tracking_root, require_masks=False)
        rate = int(rate)
        icfg = InferenceConfig(window_size=state.config.canvas_size // rate,
                               sampling_rate=rate, single_object=True)
        icfg.validate_for_model(state.config)
    except (CheckpointError, IngestionError, ConfigurationError) as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_CONFIG)

    out_path = Path(out_dir)
    (out_path / "masks").mkdir(parents=True, exist_ok=True)
    index = {"images": []}
    n_masks = 0
    for record in records:
        image = record.load_image()
        stem = Path(record.image_path).stem
        dest = out_path / Path(record.image_path).name
        if not dest.exists():
            shutil.copy(record.image_path, dest)
        boxes = [o.box for o in record.objects]
        results = segment_objects(state, image, boxes, icfg, head=head)
        objects = []
        for i, (obj, r) in enumerate(zip(record.objects, results)):
            mask_rel = f"masks/{stem}_{i}.png"
            Image.fromarray(r.mask.values * 255).save(out_path / mask_rel)
            n_masks += 1
            if r.mask.values.any():
                box = tight_bbox(r.mask.as_bool())
            else:
                box = obj.box
            objects.append({"bbox": box.as_list(), "mask": mask_rel,
                            "category": obj.category})
        index["images"].append({
            "file": dest.name,
            "height": record.image_size[0],
            "width": record.image_size[1],
            "objects": objects,
        })
    (out_path / "annotations.json").write_text(
        json.dumps(index, indent=2, sort_keys=True) + "\n")
    click.echo(f"wrote {n_masks} masks and annotations.json to {out_path}")


if __name__ == "__main__":
    main()
