"""Dataset ingestion and training-time augmentation.

Augmentations co-transform image, masks, and boxes: masks are resampled
nearest-neighbor, images bilinearly, and boxes are always recomputed as the
tight bounding box of the transformed mask.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .errors import IngestionError, InputError
from .model import BoxPrompt

logger = logging.getLogger(__name__)

GRAY_VALUE = 128  # pad/rotation fill, pre-normalization
DEFAULT_MEAN = 0.5
DEFAULT_STD = 0.5


def normalized_gray(mean: float = DEFAULT_MEAN, std: float = DEFAULT_STD) -> float:
    return (GRAY_VALUE / 255.0 - mean) / std


def normalize_image(raw: np.ndarray, mean: float = DEFAULT_MEAN,
                    std: float = DEFAULT_STD) -> np.ndarray:
    """Map 8-bit HxWx3 pixels to per-channel (v/255 - mean)/std floats."""
    raw = np.asarray(raw)
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise InputError(f"expected an HxWx3 image, got shape {raw.shape}")
    return ((raw.astype(np.float32) / 255.0) - mean) / std


def tight_bbox(mask: np.ndarray) -> BoxPrompt:
    """Tight bounding box of a nonempty binary mask, right/bottom exclusive."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        raise InputError("tight_bbox of an empty mask")
    return BoxPrompt(float(xs.min()), float(ys.min()),
                     float(xs.max()) + 1.0, float(ys.max()) + 1.0)


@dataclass
class InstanceAnnotation:
    box: BoxPrompt
    mask: np.ndarray | None  # bool (H, W); None for tracking-box-only records
    category: str = ""


@dataclass
class AnnotationRecord:
    image_path: str
    image_size: tuple[int, int]  # (H, W)
    objects: list[InstanceAnnotation]
    image: np.ndarray | None = None  # optional in-memory uint8 HxWx3

    def load_image(self) -> np.ndarray:
        if self.image is not None:
            return self.image
        try:
            img = np.asarray(Image.open(self.image_path).convert("RGB"))
        except OSError as e:
            raise IngestionError(f"cannot read image {self.image_path}: {e}") from e
        return img


@dataclass
class AugmentationLog:
    scale: float = 1.0
    angle: float = 0.0
    crop_offset: tuple[int, int] = (0, 0)


@dataclass
class SampleObject:
    box: BoxPrompt  # canvas frame
    mask: np.ndarray  # bool, canvas-sized
    category: str = ""


@dataclass
class TrainingSample:
    image: np.ndarray  # float32 (canvas, canvas, 3), normalized
    objects: list[SampleObject]
    log: AugmentationLog = field(default_factory=AugmentationLog)


def load_dataset(root: str | Path, require_masks: bool = True) -> list[AnnotationRecord]:
    """Load and validate a dataset root containing ``annotations.json``.

    Boxes are tightened to their masks; all-zero masks are dropped with a
    warning. Records come back sorted by file path.
    """
    root = Path(root)
    index_path = root / "annotations.json"
    if not index_path.is_file():
        raise IngestionError(f"missing annotation index {index_path}")
    try:
        index = json.loads(index_path.read_text())
    except json.JSONDecodeError as e:
        raise IngestionError(f"malformed annotation index {index_path}: {e}") from e
    if not isinstance(index, dict) or "images" not in index:
        raise IngestionError(f"annotation index {index_path} lacks an 'images' list")

    records = []
    for entry in index["images"]:
        try:
            file, h, w = entry["file"], int(entry["height"]), int(entry["width"])
        except (KeyError, TypeError, ValueError) as e:
            raise IngestionError(f"malformed image entry {entry!r}: {e}") from e
        image_path = root / file
        if not image_path.is_file():
            raise IngestionError(f"missing image file {image_path}")
        objects = []
        for obj in entry.get("objects", []):
            category = obj.get("category", "")
            mask_rel = obj.get("mask")
            if mask_rel is None:
                if require_masks:
                    raise IngestionError(f"record {file}: object without mask")
                x0, y0, x1, y1 = obj["bbox"]
                objects.append(InstanceAnnotation(
                    box=BoxPrompt(float(x0), float(y0), float(x1), float(y1)),
                    mask=None, category=category))
                continue
            mask_path = root / mask_rel
            if not mask_path.is_file():
                raise IngestionError(f"record {file}: missing mask file {mask_path}")
            mask = np.asarray(Image.open(mask_path).convert("L")) > 127
            if mask.shape != (h, w):
                raise IngestionError(
                    f"record {file}: mask {mask_rel} has shape {mask.shape}, "
                    f"image is ({h}, {w})"
                )
            if not mask.any():
                logger.warning("record %s: dropping all-zero mask %s", file, mask_rel)
                continue
            objects.append(InstanceAnnotation(box=tight_bbox(mask), mask=mask,
                                              category=category))
        records.append(AnnotationRecord(image_path=str(image_path), image_size=(h, w),
                                        objects=objects))
    records.sort(key=lambda r: r.image_path)
    return records


def _resize(image: np.ndarray, masks: list[np.ndarray],
            s: float) -> tuple[np.ndarray, list[np.ndarray]]:
    h, w = image.shape[:2]
    nh, nw = max(1, round(h * s)), max(1, round(w * s))
    if (nh, nw) == (h, w):
        return image, masks
    img = cv2.resize(image, (nw, nh), interpolation=cv2.INTER_LINEAR)
    out_masks = [cv2.resize(m.astype(np.uint8), (nw, nh),
                            interpolation=cv2.INTER_NEAREST).astype(bool) for m in masks]
    return img, out_masks


def _place(image: np.ndarray, masks: list[np.ndarray], canvas: int,
           ox: int, oy: int) -> tuple[np.ndarray, list[np.ndarray]]:
    """Crop at (ox, oy) and/or pad bottom-right with gray to a square canvas."""
    out = np.full((canvas, canvas, 3), GRAY_VALUE, dtype=image.dtype)
    h = min(image.shape[0] - oy, canvas)
    w = min(image.shape[1] - ox, canvas)
    out[:h, :w] = image[oy:oy + h, ox:ox + w]
    out_masks = []
    for m in masks:
        mo = np.zeros((canvas, canvas), dtype=bool)
        mo[:h, :w] = m[oy:oy + h, ox:ox + w]
        out_masks.append(mo)
    return out, out_masks


def _collect_objects(masks: list[np.ndarray], categories: list[str],
                     min_area: int = 1) -> list[SampleObject]:
    objects = []
    for m, cat in zip(masks, categories):
        if int(m.sum()) < min_area:
            continue
        objects.append(SampleObject(box=tight_bbox(m), mask=m, category=cat))
    return objects


def large_scale_jitter(record: AnnotationRecord, canvas: int,
                       scale_range: tuple[float, float] = (0.1, 4.0),
                       rng: np.random.Generator | None = None,
                       mean: float = DEFAULT_MEAN, std: float = DEFAULT_STD,
                       scale: float | None = None) -> TrainingSample:
    """Random resize within scale_range, then crop or gray-pad to the canvas.

    Pass ``scale`` to pin the factor (used by the no-augmentation path).
    """
    rng = rng if rng is not None else np.random.default_rng()
    image = record.load_image()
    masks = [o.mask for o in record.objects]
    categories = [o.category for o in record.objects]
    s = float(scale) if scale is not None else float(rng.uniform(*scale_range))
    image, masks = _resize(image, masks, s)
    nh, nw = image.shape[:2]
    ox = int(rng.integers(0, nw - canvas + 1)) if nw > canvas else 0
    oy = int(rng.integers(0, nh - canvas + 1)) if nh > canvas else 0
    image, masks = _place(image, masks, canvas, ox, oy)
    return TrainingSample(
        image=normalize_image(image, mean, std),
        objects=_collect_objects(masks, categories),
        log=AugmentationLog(scale=s, crop_offset=(ox, oy)),
    )


def fit_to_canvas(record: AnnotationRecord, canvas: int,
                  mean: float = DEFAULT_MEAN, std: float = DEFAULT_STD) -> TrainingSample:
    """Deterministic scale-1 placement at the origin (no jitter)."""
    image = record.load_image()
    masks = [o.mask for o in record.objects]
    image, masks = _place(image, masks, canvas, 0, 0)
    return TrainingSample(
        image=normalize_image(image, mean, std),
        objects=_collect_objects(masks, [o.category for o in record.objects]),
        log=AugmentationLog(scale=1.0),
    )


def rotate_sample(sample: TrainingSample, angle: float,
                  mean: float = DEFAULT_MEAN, std: float = DEFAULT_STD) -> TrainingSample:
    """Rotate a canvas-sized sample about its center.

    Multiples of 90 degrees take the exact lossless path; other angles use
    bilinear (image) / nearest (mask) warps with gray corner fill.
    """
    angle = float(angle) % 360.0
    image = sample.image
    h, w = image.shape[:2]
    if h != w:
        raise InputError("rotate_sample requires a square canvas sample")
    masks = [o.mask for o in sample.objects]
    categories = [o.category for o in sample.objects]
    if angle % 90.0 == 0.0:
        k = int(angle // 90) % 4
        image = np.rot90(image, k).copy()
        masks = [np.rot90(m, k).copy() for m in masks]
    else:
        center = ((w - 1) / 2.0, (h - 1) / 2.0)
        m = cv2.getRotationMatrix2D(center, angle, 1.0)
        gray = normalized_gray(mean, std)
        image = cv2.warpAffine(image, m, (w, h), flags=cv2.INTER_LINEAR,
                               borderMode=cv2.BORDER_CONSTANT,
                               borderValue=(gray, gray, gray))
        masks = [cv2.warpAffine(mk.astype(np.uint8), m, (w, h),
                                flags=cv2.INTER_NEAREST,
                                borderMode=cv2.BORDER_CONSTANT,
                                borderValue=0).astype(bool) for mk in masks]
    log = AugmentationLog(scale=sample.log.scale, angle=angle,
                          crop_offset=sample.log.crop_offset)
    return TrainingSample(image=image, objects=_collect_objects(masks, categories), log=log)


def random_rotate(sample: TrainingSample, rng: np.random.Generator | None = None,
                  mean: float = DEFAULT_MEAN, std: float = DEFAULT_STD) -> TrainingSample:
    """Rotate by an angle drawn uniformly from [0, 360)."""
    rng = rng if rng is not None else np.random.default_rng()
    return rotate_sample(sample, float(rng.uniform(0.0, 360.0)), mean, std)


def sample_rng(global_seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample RNG substream, reproducible independent of preparation order."""
    return np.random.default_rng(np.random.SeedSequence([global_seed, epoch, index]))
