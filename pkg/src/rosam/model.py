"""Promptable segmentation backbone: patch embedding, ViT blocks, box prompt encoder.

The encoder exposes two taps: the token grid after the first block (local,
fine-grained) and the final neck-projected embedding (global context). Both
feed the decoders.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .errors import ConfigurationError, InputError


@dataclass(frozen=True)
class BoxPrompt:
    """Axis-aligned box in the pixel frame of whatever grid it accompanies."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise InputError(f"degenerate box ({self.x0}, {self.y0}, {self.x1}, {self.y1})")

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    def translated(self, dx: float, dy: float) -> "BoxPrompt":
        return BoxPrompt(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)

    def scaled(self, s: float) -> "BoxPrompt":
        return BoxPrompt(self.x0 * s, self.y0 * s, self.x1 * s, self.y1 * s)

    def as_list(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]


@dataclass
class EncoderOutput:
    early_features: torch.Tensor  # (C, G, G), after block 1
    final_embedding: torch.Tensor  # (C, G, G), after last block + neck


class LayerNorm2d(nn.Module):
    """Channel-wise LayerNorm over (C, H, W) tensors."""

    def __init__(self, num_channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(num_channels))
        self.bias = nn.Parameter(torch.zeros(num_channels))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mean = x.mean(dim=0, keepdim=True)
        var = (x - mean).pow(2).mean(dim=0, keepdim=True)
        x = (x - mean) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class Attention(nn.Module):
    """Multi-head self-attention with separate Q/K/V projections.

    Q and V are kept as individual Linear modules so low-rank adapters can
    wrap exactly those two projections.
    """

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (N, C)
        n, c = x.shape
        q = self.q_proj(x).reshape(n, self.num_heads, self.head_dim).transpose(0, 1)
        k = self.k_proj(x).reshape(n, self.num_heads, self.head_dim).transpose(0, 1)
        v = self.v_proj(x).reshape(n, self.num_heads, self.head_dim).transpose(0, 1)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = (attn @ v).transpose(0, 1).reshape(n, c)
        return self.out_proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, dim * 4)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class ImageEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        g = cfg.grid_size
        self.grid_size = g
        self.patch_embed = nn.Conv2d(3, cfg.embed_dim, kernel_size=cfg.patch_size,
                                     stride=cfg.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(g * g, cfg.embed_dim))
        nn.init.normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(Block(cfg.embed_dim, cfg.num_heads)
                                    for _ in range(cfg.num_blocks))
        self.neck = nn.Sequential(
            nn.Conv2d(cfg.embed_dim, cfg.embed_dim, kernel_size=1, bias=False),
            LayerNorm2d(cfg.embed_dim),
            nn.Conv2d(cfg.embed_dim, cfg.embed_dim, kernel_size=3, padding=1, bias=False),
            LayerNorm2d(cfg.embed_dim),
        )

    def forward(self, image: torch.Tensor) -> EncoderOutput:
        # image: (3, H, W)
        g = self.grid_size
        x = self.patch_embed(image.unsqueeze(0)).squeeze(0)  # (C, g, g)
        c = x.shape[0]
        tokens = x.reshape(c, g * g).transpose(0, 1) + self.pos_embed  # (N, C)
        early = None
        for i, block in enumerate(self.blocks):
            tokens = block(tokens)
            if i == 0:
                early = tokens.transpose(0, 1).reshape(c, g, g)
        final = tokens.transpose(0, 1).reshape(c, g, g)
        final = self.neck(final)
        return EncoderOutput(early_features=early, final_embedding=final)


class PromptEncoder(nn.Module):
    """Encodes a box as two corner tokens: sinusoidal position + learned corner type."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.canvas_size = cfg.canvas_size
        self.embed_dim = cfg.embed_dim
        self.corner_embed = nn.Embedding(2, cfg.embed_dim)  # 0 = top-left, 1 = bottom-right

    def _positional(self, x: float, y: float) -> torch.Tensor:
        quarter = self.embed_dim // 4
        device = self.corner_embed.weight.device
        dtype = self.corner_embed.weight.dtype
        freqs = torch.exp(
            torch.arange(quarter, device=device, dtype=dtype)
            * (-math.log(10000.0) / max(quarter - 1, 1))
        ) * (2.0 * math.pi)
        xs = torch.as_tensor(x, device=device, dtype=dtype) * freqs
        ys = torch.as_tensor(y, device=device, dtype=dtype) * freqs
        pe = torch.cat([xs.sin(), xs.cos(), ys.sin(), ys.cos()])
        if pe.numel() < self.embed_dim:  # embed_dim not divisible by 4
            pe = torch.cat([pe, torch.zeros(self.embed_dim - pe.numel(), device=device, dtype=dtype)])
        return pe

    def forward(self, box: BoxPrompt) -> torch.Tensor:
        s = float(self.canvas_size)
        if not (0 <= box.x0 and box.x1 <= s and 0 <= box.y0 and box.y1 <= s):
            raise InputError(f"box {box.as_list()} outside canvas frame [0, {s}]")
        tl = self._positional(box.x0 / s, box.y0 / s) + self.corner_embed.weight[0]
        br = self._positional(box.x1 / s, box.y1 / s) + self.corner_embed.weight[1]
        return torch.stack([tl, br])  # (2, C)


class SegmentationNetwork(nn.Module):
    """Encoder + prompt encoder + dual-head decoder, bundled for checkpointing."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        from .decoder import MaskDecoder  # deferred: decoder imports model types

        self.encoder = ImageEncoder(cfg)
        self.prompt_encoder = PromptEncoder(cfg)
        self.decoder = MaskDecoder(cfg)


@dataclass
class ModelState:
    """The single source of truth for weights: a network plus its config.

    Parameter access is by hierarchical name; trainability is tracked via
    ``requires_grad``. Forward operations never mutate the state.
    """

    network: SegmentationNetwork
    config: ModelConfig
    lora_injected: bool = False

    def params(self) -> dict[str, torch.Tensor]:
        return dict(self.network.named_parameters())

    def trainable(self) -> dict[str, bool]:
        return {name: p.requires_grad for name, p in self.network.named_parameters()}

    def param_snapshot(self) -> dict[str, np.ndarray]:
        """Detached numpy copies of every parameter, for byte-level diffing."""
        return {name: p.detach().numpy().copy() for name, p in self.network.named_parameters()}


def build_model(config: ModelConfig) -> ModelState:
    """Deterministically initialize a fresh model (no adapters, nothing trainable)."""
    config.validate()
    if config.patch_size % config.mask_stride != 0:
        raise ConfigurationError(
            f"patch_size ({config.patch_size}) must be divisible by mask_stride "
            f"({config.mask_stride})"
        )
    ratio = config.patch_size // config.mask_stride
    if ratio & (ratio - 1) != 0:
        raise ConfigurationError(
            f"patch_size / mask_stride ({ratio}) must be a power of two"
        )
    torch.manual_seed(config.seed)
    network = SegmentationNetwork(config)
    for p in network.parameters():
        p.requires_grad_(False)
    return ModelState(network=network, config=config)


def _to_image_tensor(image, canvas: int, dtype: torch.dtype) -> torch.Tensor:
    if isinstance(image, torch.Tensor):
        t = image
    else:
        arr = np.asarray(image, dtype=np.float32)
        if arr.ndim == 3 and arr.shape[2] == 3:  # HWC -> CHW
            arr = arr.transpose(2, 0, 1)
        t = torch.from_numpy(arr.copy())
    if t.ndim != 3 or t.shape[0] != 3 or t.shape[1] != canvas or t.shape[2] != canvas:
        raise InputError(
            f"expected a 3x{canvas}x{canvas} image (or HWC equivalent), got {tuple(t.shape)}"
        )
    return t.to(dtype)


def encoder_forward(state: ModelState, image) -> EncoderOutput:
    """Run the image encoder. Accepts (H, W, 3) numpy or (3, H, W) tensors."""
    dtype = next(state.network.parameters()).dtype
    t = _to_image_tensor(image, state.config.canvas_size, dtype)
    return state.network.encoder(t)


def encode_box_prompt(state: ModelState, box: BoxPrompt) -> torch.Tensor:
    """Encode a canvas-frame box as two prompt tokens of embed_dim channels."""
    return state.network.prompt_encoder(box)
