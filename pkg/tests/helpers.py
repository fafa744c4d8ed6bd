"""Shared fixtures: tiny configs, synthetic shapes, on-disk datasets."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from rosam.config import ModelConfig
from rosam.data import AnnotationRecord, InstanceAnnotation, tight_bbox


def tiny_config(**overrides) -> ModelConfig:
    """Smallest geometry that exercises every mechanism (4x4 token grid)."""
    kwargs = dict(canvas_size=64, patch_size=16, embed_dim=32, num_blocks=2,
                  num_heads=2, lora_rank=2, mask_stride=4, seed=0)
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


def toy_config(**overrides) -> ModelConfig:
    kwargs = dict(canvas_size=256, patch_size=16, embed_dim=64, num_blocks=4,
                  num_heads=4, lora_rank=4, mask_stride=4, seed=0)
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


def shape_record(kind: str, size: int = 256, name: str | None = None) -> AnnotationRecord:
    """In-memory record with one high-contrast object (rectangle or disk)."""
    img = np.full((size, size, 3), 40, np.uint8)
    if kind == "rect":
        mask = np.zeros((size, size), bool)
        mask[size * 15 // 64: size * 43 // 64, size * 20 // 64: size * 50 // 64] = True
        img[mask] = (200, 80, 60)
    elif kind == "disk":
        yy, xx = np.mgrid[0:size, 0:size]
        r = size * 14 // 64
        mask = (yy - size // 2) ** 2 + (xx - size * 30 // 64) ** 2 < r * r
        img[mask] = (60, 200, 120)
    else:
        raise ValueError(kind)
    return AnnotationRecord(
        image_path=name or kind, image_size=(size, size),
        objects=[InstanceAnnotation(box=tight_bbox(mask), mask=mask, category=kind)],
        image=img)


def random_record(rng: np.random.Generator, size: int = 96) -> AnnotationRecord:
    """Record with 1-3 random rectangles on a noisy background."""
    img = rng.integers(0, 255, (size, size, 3), dtype=np.uint8)
    objects = []
    for _ in range(int(rng.integers(1, 4))):
        y0 = int(rng.integers(0, size - 8))
        x0 = int(rng.integers(0, size - 8))
        y1 = y0 + int(rng.integers(4, size - y0))
        x1 = x0 + int(rng.integers(4, size - x0))
        mask = np.zeros((size, size), bool)
        mask[y0:y1, x0:x1] = True
        objects.append(InstanceAnnotation(box=tight_bbox(mask), mask=mask,
                                          category="box"))
    return AnnotationRecord(image_path="random", image_size=(size, size),
                            objects=objects, image=img)


def write_dataset(root: Path, records: list[AnnotationRecord],
                  loose_boxes: bool = False) -> Path:
    """Materialize records as PNG image + mask files with annotations.json."""
    root = Path(root)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    index = {"images": []}
    for record in records:
        stem = Path(record.image_path).stem
        file = f"{stem}.png"
        Image.fromarray(record.load_image()).save(root / file)
        objects = []
        for i, obj in enumerate(record.objects):
            entry = {"category": obj.category}
            if obj.mask is not None:
                mask_rel = f"masks/{stem}_{i}.png"
                Image.fromarray(obj.mask.astype(np.uint8) * 255).save(root / mask_rel)
                entry["mask"] = mask_rel
            if loose_boxes:
                h, w = record.image_size
                entry["bbox"] = [0.0, 0.0, float(w), float(h)]
            else:
                entry["bbox"] = obj.box.as_list()
            objects.append(entry)
        index["images"].append({"file": file, "height": record.image_size[0],
                                "width": record.image_size[1], "objects": objects})
    (root / "annotations.json").write_text(json.dumps(index))
    return root


def random_mask(rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """Random blobby binary mask (thresholded smoothed noise)."""
    import cv2

    noise = rng.random((size, size)).astype(np.float32)
    smooth = cv2.GaussianBlur(noise, (0, 0), sigmaX=3)
    return smooth > np.quantile(smooth, 0.6)


def finite_difference_check(network, loss_fn, coords, h: float = 1e-4) -> float:
    """Max relative error between autograd and central differences.

    coords: list of (param_name, flat_index). The network must be in double
    precision; loss_fn() evaluates the scalar loss from current weights.
    """
    import torch

    params = dict(network.named_parameters())
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for name, idx in coords:
        p = params[name]
        analytic = float(p.grad.reshape(-1)[idx])
        with torch.no_grad():
            flat = p.reshape(-1)
            orig = float(flat[idx])
            flat[idx] = orig + h
            up = float(loss_fn())
            flat[idx] = orig - h
            down = float(loss_fn())
            flat[idx] = orig
        numeric = (up - down) / (2 * h)
        scale = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / scale)
    for p in params.values():
        p.grad = None
    return worst
