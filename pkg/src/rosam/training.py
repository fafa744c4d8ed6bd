"""Training engine: BCE+Dice supervision, freezing policy, alternating decoder
updates, the optimization loop, and checkpointing."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import ModelConfig, TrainConfig
from .data import (AnnotationRecord, TrainingSample, fit_to_canvas,
                   large_scale_jitter, random_rotate, sample_rng)
from .errors import CheckpointError, InputError, RosamError, StateError
from .lora import inject_lora
from .maskgrid import MaskGrid
from .model import ModelState, build_model

SAM_TURN = "sam_turn"
HQ_TURN = "hq_turn"

CKPT_MAGIC = b"ROSAMCKP"
CKPT_VERSION = 1


class NonFiniteLossError(RosamError):
    """Training produced a non-finite loss; the message names the step."""


def param_group(name: str, num_blocks: int) -> str:
    """Classify a parameter name into its freezing-policy group."""
    if "lora_" in name:
        return "lora"
    if name.startswith(f"encoder.blocks.{num_blocks - 1}."):
        return "last_block"
    if name.startswith("decoder.hq"):
        return "hq"
    if name.startswith("decoder."):
        return "sam_decoder"
    return "frozen"


def set_trainability(state: ModelState, phase: str) -> ModelState:
    """Apply the freezing policy for one alternation phase.

    LoRA pairs and the last encoder block train on every phase; the original
    decoder only on sam_turn, the HQ branch only on hq_turn; everything else
    stays frozen.
    """
    if phase not in (SAM_TURN, HQ_TURN):
        raise InputError(f"unknown phase {phase!r}")
    if not state.lora_injected:
        raise StateError("set_trainability requires adapters to be injected first")
    active = "sam_decoder" if phase == SAM_TURN else "hq"
    for name, p in state.network.named_parameters():
        group = param_group(name, state.config.num_blocks)
        p.requires_grad_(group in ("lora", "last_block", active))
    return state


def _as_tensor(grid, binary: bool) -> torch.Tensor:
    if isinstance(grid, MaskGrid):
        values = grid.as_bool().astype(np.float32) if binary else grid.values
        return torch.from_numpy(np.ascontiguousarray(values))
    t = torch.as_tensor(grid)
    return t.float() if binary else t


def bce_dice_loss(logits, gt, bce_weight: float = 1.0, dice_weight: float = 1.0,
                  smooth: float = 1.0) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Weighted BCE + soft-Dice loss. Returns (total, bce, dice) terms."""
    logits_t = _as_tensor(logits, binary=False)
    gt_t = _as_tensor(gt, binary=True).to(logits_t.dtype)
    if logits_t.shape != gt_t.shape:
        raise InputError(f"logits {tuple(logits_t.shape)} vs gt {tuple(gt_t.shape)}")
    bce = F.binary_cross_entropy_with_logits(logits_t, gt_t)
    probs = torch.sigmoid(logits_t)
    inter = (probs * gt_t).sum()
    dice = 1.0 - (2.0 * inter + smooth) / (probs.sum() + gt_t.sum() + smooth)
    total = bce_weight * bce + dice_weight * dice
    return total, bce, dice


class AdamW:
    """Decoupled-weight-decay Adam over named parameters.

    Keeps per-parameter step counts so alternation (parameters skipping
    steps) gets correct bias correction, and so moments serialize by name.
    """

    def __init__(self, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-4):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m: dict[str, torch.Tensor] = {}
        self.v: dict[str, torch.Tensor] = {}
        self.steps: dict[str, int] = {}

    @torch.no_grad()
    def step(self, named_params) -> list[str]:
        """Update every trainable parameter that has a gradient; returns their names."""
        updated = []
        b1, b2 = self.betas
        for name, p in named_params:
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            if name not in self.m:
                self.m[name] = torch.zeros_like(p)
                self.v[name] = torch.zeros_like(p)
                self.steps[name] = 0
            t = self.steps[name] + 1
            self.steps[name] = t
            m = self.m[name].mul_(b1).add_(g, alpha=1 - b1)
            v = self.v[name].mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            p.mul_(1 - self.lr * self.weight_decay)
            p.add_(m_hat / (v_hat.sqrt() + self.eps), alpha=-self.lr)
            updated.append(name)
        return updated

    def zero_grad(self, named_params) -> None:
        for _, p in named_params:
            p.grad = None


@dataclass
class LossRecord:
    step: int
    phase: str
    bce: float
    dice: float
    total: float


def phase_for_step(step_index: int) -> str:
    return SAM_TURN if step_index % 2 == 0 else HQ_TURN


def training_step(state: ModelState, optimizer: AdamW, batch: list[TrainingSample],
                  step_index: int, cfg: TrainConfig,
                  phase: str | None = None) -> LossRecord:
    """One alternating update: loss on the active head only, applied to the
    trainable parameters of that phase."""
    if not batch:
        raise InputError("empty batch")
    if phase is None:
        phase = phase_for_step(step_index)
    set_trainability(state, phase)
    net = state.network
    canvas = state.config.canvas_size

    optimizer.zero_grad(net.named_parameters())
    bce_sum = dice_sum = 0.0
    loss_acc = None
    n_objects = 0
    for sample in batch:
        if not sample.objects:
            continue
        image = torch.from_numpy(np.ascontiguousarray(sample.image.transpose(2, 0, 1)))
        enc = net.encoder(image)
        for obj in sample.objects:
            prompt = net.prompt_encoder(obj.box)
            out = net.decoder(enc, prompt)
            logits = out.sam_logits if phase == SAM_TURN else out.hq_logits
            logits = F.interpolate(logits[None, None], size=(canvas, canvas),
                                   mode="bilinear", align_corners=False)[0, 0]
            gt = torch.from_numpy(obj.mask.astype(np.float32))
            loss, bce, dice = bce_dice_loss(logits, gt, cfg.bce_weight, cfg.dice_weight)
            loss_acc = loss if loss_acc is None else loss_acc + loss
            bce_sum += float(bce.detach())
            dice_sum += float(dice.detach())
            n_objects += 1
    if n_objects == 0:
        raise InputError("batch contains no objects")
    loss_acc = loss_acc / n_objects
    total = float(loss_acc.detach())
    if not np.isfinite(total):
        raise NonFiniteLossError(f"non-finite loss at step {step_index}")
    loss_acc.backward()
    optimizer.step(net.named_parameters())
    optimizer.zero_grad(net.named_parameters())
    return LossRecord(step=step_index, phase=phase, bce=bce_sum / n_objects,
                      dice=dice_sum / n_objects, total=total)


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: dict[str, np.ndarray] = field(default_factory=dict)
    opt_steps: dict[str, int] = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    train_seed: int = 0


def checkpoint_from_state(state: ModelState, optimizer: AdamW | None = None,
                          step: int = 0, epoch: int = 0,
                          train_seed: int = 0) -> Checkpoint:
    opt_m = {k: t.numpy().copy() for k, t in (optimizer.m if optimizer else {}).items()}
    opt_v = {k: t.numpy().copy() for k, t in (optimizer.v if optimizer else {}).items()}
    return Checkpoint(config=state.config, params=state.param_snapshot(),
                      opt_m=opt_m, opt_v=opt_v,
                      opt_steps=dict(optimizer.steps) if optimizer else {},
                      step=step, epoch=epoch, train_seed=train_seed)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Self-describing container: magic + version + JSON header + named
    little-endian float32 arrays. Canonical ordering makes saves byte-stable."""
    arrays: list[tuple[str, np.ndarray]] = []
    for name in sorted(ckpt.params):
        arrays.append((f"param.{name}", ckpt.params[name]))
    for name in sorted(ckpt.opt_m):
        arrays.append((f"adam.m.{name}", ckpt.opt_m[name]))
    for name in sorted(ckpt.opt_v):
        arrays.append((f"adam.v.{name}", ckpt.opt_v[name]))
    header = {
        "config": {
            "canvas_size": ckpt.config.canvas_size,
            "patch_size": ckpt.config.patch_size,
            "embed_dim": ckpt.config.embed_dim,
            "num_blocks": ckpt.config.num_blocks,
            "num_heads": ckpt.config.num_heads,
            "lora_rank": ckpt.config.lora_rank,
            "mask_stride": ckpt.config.mask_stride,
            "seed": ckpt.config.seed,
        },
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "train_seed": ckpt.train_seed,
        "opt_steps": {k: ckpt.opt_steps[k] for k in sorted(ckpt.opt_steps)},
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < 20 or raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<Q", raw, 12)
    try:
        header = json.loads(raw[20:20 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e
    offset = 20 + hlen
    params: dict[str, np.ndarray] = {}
    opt_m: dict[str, np.ndarray] = {}
    opt_v: dict[str, np.ndarray] = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated array data for {spec['name']}")
        arr = np.frombuffer(raw[offset:end], dtype="<f4").reshape(shape).copy()
        offset = end
        name = spec["name"]
        if name.startswith("param."):
            params[name[len("param."):]] = arr
        elif name.startswith("adam.m."):
            opt_m[name[len("adam.m."):]] = arr
        elif name.startswith("adam.v."):
            opt_v[name[len("adam.v."):]] = arr
        else:
            raise CheckpointError(f"{path}: unknown array namespace {name!r}")
    config = ModelConfig(**header["config"])
    return Checkpoint(config=config, params=params, opt_m=opt_m, opt_v=opt_v,
                      opt_steps={k: int(v) for k, v in header["opt_steps"].items()},
                      step=int(header["step"]), epoch=int(header["epoch"]),
                      train_seed=int(header["train_seed"]))


def state_from_checkpoint(ckpt: Checkpoint) -> ModelState:
    """Rebuild a ModelState (injecting adapters if the checkpoint has them)."""
    state = build_model(ckpt.config)
    if any("lora_" in name for name in ckpt.params):
        inject_lora(state, ckpt.config.lora_rank)
    current = dict(state.network.named_parameters())
    if set(current) != set(ckpt.params):
        missing = set(current) ^ set(ckpt.params)
        raise CheckpointError(f"parameter name mismatch: {sorted(missing)[:5]} ...")
    with torch.no_grad():
        for name, p in current.items():
            arr = ckpt.params[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(
                    f"shape mismatch for {name}: checkpoint {arr.shape} vs model "
                    f"{tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr))
    return state


def optimizer_from_checkpoint(ckpt: Checkpoint, cfg: TrainConfig) -> AdamW:
    opt = AdamW(lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    opt.m = {k: torch.from_numpy(v.copy()) for k, v in ckpt.opt_m.items()}
    opt.v = {k: torch.from_numpy(v.copy()) for k, v in ckpt.opt_v.items()}
    opt.steps = dict(ckpt.opt_steps)
    return opt


def write_history(path: str | Path, history: list[LossRecord]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "phase", "bce", "dice", "total"])
        for r in history:
            writer.writerow([r.step, r.phase, f"{r.bce:.8f}", f"{r.dice:.8f}",
                             f"{r.total:.8f}"])


def prepare_epoch_samples(dataset: list[AnnotationRecord], model_cfg: ModelConfig,
                          cfg: TrainConfig, epoch: int) -> list[TrainingSample]:
    """Augmented samples for one epoch, in a seeded shuffled order."""
    order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 999983, epoch]))
    order = order_rng.permutation(len(dataset))
    samples = []
    for idx in order:
        record = dataset[int(idx)]
        rng = sample_rng(cfg.seed, epoch, int(idx))
        if cfg.use_lsj:
            sample = large_scale_jitter(record, model_cfg.canvas_size,
                                        cfg.lsj_scale_range, rng)
        else:
            sample = fit_to_canvas(record, model_cfg.canvas_size)
        if cfg.use_rotation:
            sample = random_rotate(sample, rng)
        if sample.objects:
            samples.append(sample)
    return samples


def train(state: ModelState, dataset: list[AnnotationRecord], cfg: TrainConfig,
          run_dir: str | Path | None = None,
          resume_from: str | Path | None = None) -> tuple[Checkpoint, list[LossRecord]]:
    """Run the full alternating-optimization loop.

    Emits a checkpoint per epoch (plus final) and the loss history when
    run_dir is given. Resuming continues at the checkpoint's epoch boundary
    and reproduces the uninterrupted run exactly.
    """
    if not dataset:
        raise InputError("dataset is empty")
    start_epoch, step = 0, 0
    optimizer = AdamW(lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        state = state_from_checkpoint(ckpt)
        optimizer = optimizer_from_checkpoint(ckpt, cfg)
        start_epoch, step = ckpt.epoch, ckpt.step
    elif not state.lora_injected:
        inject_lora(state, state.config.lora_rank)

    run_path = Path(run_dir) if run_dir is not None else None
    if run_path is not None:
        run_path.mkdir(parents=True, exist_ok=True)

    history: list[LossRecord] = []
    for epoch in range(start_epoch, cfg.epochs):
        samples = prepare_epoch_samples(dataset, state.config, cfg, epoch)
        phase = None
        if cfg.alternation_granularity == "per_epoch":
            phase = SAM_TURN if epoch % 2 == 0 else HQ_TURN
        for i in range(0, len(samples), cfg.batch_size):
            batch = samples[i:i + cfg.batch_size]
            record = training_step(state, optimizer, batch, step, cfg, phase=phase)
            history.append(record)
            step += 1
        if run_path is not None:
            save_checkpoint(
                checkpoint_from_state(state, optimizer, step, epoch + 1, cfg.seed),
                run_path / f"epoch_{epoch:04d}.ckpt")
    final = checkpoint_from_state(state, optimizer, step, cfg.epochs, cfg.seed)
    if run_path is not None:
        save_checkpoint(final, run_path / "final.ckpt")
        write_history(run_path / "history.csv", history)
    return final, history
