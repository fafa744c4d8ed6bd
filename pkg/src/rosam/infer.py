"""Prompt-centered tiled inference: crop near each box, upsample, predict one
object per patch, and restore the prediction into the full-resolution frame."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .config import InferenceConfig
from .data import GRAY_VALUE, normalize_image
from .decoder import binarize, decode, upsample_logits
from .errors import InputError
from .maskgrid import BINARY, LOGITS, MaskGrid
from .model import BoxPrompt, ModelState, encode_box_prompt, encoder_forward

logger = logging.getLogger(__name__)

NEG_INF = np.float32(-1e9)


@dataclass(frozen=True)
class CropWindow:
    origin_x: int
    origin_y: int
    size: int
    pad_right: int = 0
    pad_bottom: int = 0
    truncated: bool = False

    @property
    def content_w(self) -> int:
        return self.size - self.pad_right

    @property
    def content_h(self) -> int:
        return self.size - self.pad_bottom


def plan_crops(boxes: list[BoxPrompt], image_size: tuple[int, int],
               window_size: int) -> list[CropWindow]:
    """One window per box, centered on the box and clamped into the image.

    image_size is (H, W). Along an axis smaller than the window, the origin
    is 0 and the deficit is recorded as gray padding.
    """
    h, w = image_size
    windows = []
    for box in boxes:
        if not (0 <= box.x0 and box.x1 <= w and 0 <= box.y0 and box.y1 <= h):
            raise InputError(f"box {box.as_list()} outside image ({h}, {w})")
        truncated = box.width > window_size or box.height > window_size
        if truncated:
            logger.warning("box %s larger than window %d; object will be truncated",
                           box.as_list(), window_size)
        cx, cy = box.center
        if w >= window_size:
            ox = min(max(int(round(cx - window_size / 2)), 0), w - window_size)
            pad_r = 0
        else:
            ox, pad_r = 0, window_size - w
        if h >= window_size:
            oy = min(max(int(round(cy - window_size / 2)), 0), h - window_size)
            pad_b = 0
        else:
            oy, pad_b = 0, window_size - h
        windows.append(CropWindow(origin_x=ox, origin_y=oy, size=window_size,
                                  pad_right=pad_r, pad_bottom=pad_b,
                                  truncated=truncated))
    return windows


_INTERP = {"bilinear": cv2.INTER_LINEAR, "bicubic": cv2.INTER_CUBIC}


def extract_and_upsample(image: np.ndarray, window: CropWindow, cfg: InferenceConfig,
                         box: BoxPrompt) -> tuple[np.ndarray, BoxPrompt]:
    """Crop the window (gray-padding deficits), resample to canvas size, and
    map the box into the patch frame."""
    h, w = image.shape[:2]
    if window.origin_x + window.content_w > w or window.origin_y + window.content_h > h:
        raise InputError(f"window {window} does not fit image ({h}, {w})")
    patch = np.full((window.size, window.size, 3), GRAY_VALUE, dtype=image.dtype)
    patch[:window.content_h, :window.content_w] = image[
        window.origin_y:window.origin_y + window.content_h,
        window.origin_x:window.origin_x + window.content_w]
    canvas = window.size * cfg.sampling_rate
    if cfg.sampling_rate != 1:
        patch = cv2.resize(patch, (canvas, canvas),
                           interpolation=_INTERP[cfg.interpolation])
    r = cfg.sampling_rate
    x0 = max((box.x0 - window.origin_x) * r, 0.0)
    y0 = max((box.y0 - window.origin_y) * r, 0.0)
    x1 = min((box.x1 - window.origin_x) * r, float(canvas))
    y1 = min((box.y1 - window.origin_y) * r, float(canvas))
    return patch, BoxPrompt(x0, y0, max(x1, x0 + 1e-3), max(y1, y0 + 1e-3))


def _window_logits(patch_logits: MaskGrid, window: CropWindow,
                   cfg: InferenceConfig) -> np.ndarray:
    """Canvas-resolution logits back to window resolution, padding stripped."""
    if patch_logits.kind != LOGITS:
        raise InputError("restore expects logit-kind patch predictions")
    canvas = window.size * cfg.sampling_rate
    if patch_logits.shape != (canvas, canvas):
        raise InputError(
            f"patch logits {patch_logits.shape} do not match canvas ({canvas}, {canvas})")
    values = patch_logits.values
    if cfg.sampling_rate != 1:
        t = torch.from_numpy(values)[None, None]
        values = F.interpolate(t, size=(window.size, window.size), mode="bilinear",
                               align_corners=False)[0, 0].numpy()
    return values[:window.content_h, :window.content_w]


def restore_mask(patch_logits: MaskGrid, window: CropWindow, cfg: InferenceConfig,
                 full_size: tuple[int, int]) -> MaskGrid:
    """Downsample, strip padding, binarize, and paste at the window origin."""
    h, w = full_size
    if window.origin_x + window.content_w > w or window.origin_y + window.content_h > h:
        raise InputError(f"window {window} inconsistent with full size ({h}, {w})")
    logits = _window_logits(patch_logits, window, cfg)
    binary = (logits > cfg.logit_threshold).astype(np.uint8)
    full = np.zeros((h, w), dtype=np.uint8)
    full[window.origin_y:window.origin_y + binary.shape[0],
         window.origin_x:window.origin_x + binary.shape[1]] = binary
    return MaskGrid(full, kind=BINARY)


def restore_logits(patch_logits: MaskGrid, window: CropWindow, cfg: InferenceConfig,
                   full_size: tuple[int, int]) -> np.ndarray:
    """Full-size float32 logit map; pixels outside the window get -inf-like fill."""
    h, w = full_size
    logits = _window_logits(patch_logits, window, cfg)
    full = np.full((h, w), NEG_INF, dtype=np.float32)
    full[window.origin_y:window.origin_y + logits.shape[0],
         window.origin_x:window.origin_x + logits.shape[1]] = logits
    return full


@dataclass
class ObjectResult:
    index: int
    box: BoxPrompt
    window: CropWindow
    mask: MaskGrid  # full-size binary
    logits: np.ndarray  # full-size float32
    max_logit: float


def segment_objects(state: ModelState, image: np.ndarray, boxes: list[BoxPrompt],
                    cfg: InferenceConfig, head: str = "hq") -> list[ObjectResult]:
    """Plan, extract, encode, decode, and restore one mask per box (in order)."""
    if head not in ("sam", "hq"):
        raise InputError(f"unknown head {head!r}")
    cfg.validate_for_model(state.config)
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InputError(f"expected an HxWx3 image, got {image.shape}")
    full_size = image.shape[:2]
    windows = plan_crops(boxes, full_size, cfg.window_size)
    if not cfg.single_object:
        # Multi-object mode: boxes fully inside an earlier window reuse it
        # instead of getting their own centered crop.
        for i, (box, win) in enumerate(zip(boxes, windows)):
            for prev in windows[:i]:
                if (prev.origin_x <= box.x0 and box.x1 <= prev.origin_x + prev.content_w
                        and prev.origin_y <= box.y0
                        and box.y1 <= prev.origin_y + prev.content_h):
                    windows[i] = prev
                    break

    results = []
    enc_cache: dict[tuple[int, int], object] = {}
    canvas = state.config.canvas_size
    with torch.no_grad():
        for i, (box, window) in enumerate(zip(boxes, windows)):
            patch, patch_box = extract_and_upsample(image, window, cfg, box)
            key = (window.origin_x, window.origin_y)
            enc = enc_cache.get(key)
            if enc is None:
                enc = encoder_forward(state, normalize_image(patch))
                enc_cache[key] = enc
            prompt = encode_box_prompt(state, patch_box)
            out = decode(state, enc, prompt)
            logits = out.sam_logits if head == "sam" else out.hq_logits
            grid = MaskGrid(logits.numpy(), kind=LOGITS)
            grid = upsample_logits(grid, canvas, canvas)
            mask = restore_mask(grid, window, cfg, full_size)
            full_logits = restore_logits(grid, window, cfg, full_size)
            results.append(ObjectResult(
                index=i, box=box, window=window, mask=mask, logits=full_logits,
                max_logit=float(grid.values.max())))
    return results


def merge_instance_masks(masks: list[MaskGrid],
                         per_pixel_logits: list[np.ndarray]) -> np.ndarray:
    """Label map resolving overlaps by higher restored logit; ties go to the
    lower instance index. Background is -1."""
    if len(masks) != len(per_pixel_logits):
        raise InputError("masks and logit maps must pair up")
    if not masks:
        return np.full((0, 0), -1, dtype=np.int32)
    shape = masks[0].shape
    labels = np.full(shape, -1, dtype=np.int32)
    best = np.full(shape, NEG_INF, dtype=np.float32)
    claimed = np.zeros(shape, dtype=bool)
    for i, (mask, logits) in enumerate(zip(masks, per_pixel_logits)):
        if mask.shape != shape or logits.shape != shape:
            raise InputError(f"instance {i}: size mismatch with {shape}")
        m = mask.as_bool()
        better = m & (~claimed | (logits > best))
        labels[better] = i
        best[better] = logits[better]
        claimed |= m
    return labels


def write_results(out_dir: str | Path, image_path: str | Path,
                  results: list[ObjectResult], head: str) -> list[Path]:
    """Write per-object mask PNGs, a 16-bit merged label map, and results.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(image_path).stem
    written = []
    for r in results:
        path = out_dir / f"{stem}_{r.index}_{head}.png"
        Image.fromarray(r.mask.values * 255).save(path)
        written.append(path)
    labels = merge_instance_masks([r.mask for r in results],
                                  [r.logits for r in results])
    label_path = out_dir / f"{stem}_labels_{head}.png"
    Image.fromarray((labels + 1).astype(np.uint16)).save(label_path)
    meta = {
        "image": str(image_path),
        "head": head,
        "objects": [
            {"index": r.index, "box": r.box.as_list(),
             "window": [r.window.origin_x, r.window.origin_y, r.window.size],
             "mask": f"{stem}_{r.index}_{head}.png",
             "max_logit": r.max_logit}
            for r in results
        ],
    }
    results_path = out_dir / "results.json"
    existing = []
    if results_path.is_file():
        existing = json.loads(results_path.read_text())
    existing = [e for e in existing if e["image"] != str(image_path)] + [meta]
    results_path.write_text(json.dumps(existing, indent=2, sort_keys=True) + "\n")
    return written
