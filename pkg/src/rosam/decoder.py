"""Dual-head mask decoder.

The original head follows the SAM recipe: two two-way attention layers mix
mask + prompt tokens with the image embedding, the mask token predicts dynamic
weights, and those weights are applied point-wise to upsampled mask features.
The high-quality head fuses the encoder's early features (edge detail) with
the decoder's mask features before applying its own token's dynamic weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .errors import InputError
from .maskgrid import BINARY, LOGITS, MaskGrid
from .model import EncoderOutput, LayerNorm2d, ModelState


@dataclass
class DecoderOutput:
    sam_logits: torch.Tensor  # (S, S), S = canvas / mask_stride
    hq_logits: torch.Tensor  # (S, S)
    sam_token: torch.Tensor  # (C,)
    hq_token: torch.Tensor  # (C,)


class CrossAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        nq, c = q.shape
        nk = k.shape[0]
        qh = self.q_proj(q).reshape(nq, self.num_heads, self.head_dim).transpose(0, 1)
        kh = self.k_proj(k).reshape(nk, self.num_heads, self.head_dim).transpose(0, 1)
        vh = self.v_proj(v).reshape(nk, self.num_heads, self.head_dim).transpose(0, 1)
        attn = torch.softmax(qh @ kh.transpose(-2, -1) * self.scale, dim=-1)
        out = (attn @ vh).transpose(0, 1).reshape(nq, c)
        return self.out_proj(out)


class TwoWayLayer(nn.Module):
    """Token self-attention, token-to-image and image-to-token cross-attention."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.self_attn = CrossAttention(dim, num_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_t2i = CrossAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 4), nn.GELU(), nn.Linear(dim * 4, dim))
        self.norm3 = nn.LayerNorm(dim)
        self.cross_i2t = CrossAttention(dim, num_heads)
        self.norm4 = nn.LayerNorm(dim)

    def forward(self, tokens: torch.Tensor, image: torch.Tensor,
                image_pe: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        tokens = self.norm1(tokens + self.self_attn(tokens, tokens, tokens))
        tokens = self.norm2(tokens + self.cross_t2i(tokens, image + image_pe, image))
        tokens = self.norm3(tokens + self.mlp(tokens))
        image = self.norm4(image + self.cross_i2t(image + image_pe, tokens, tokens))
        return tokens, image


class HyperMLP(nn.Module):
    """Token -> dynamic per-channel weights for point-wise mask prediction."""

    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)
        self.fc3 = nn.Linear(dim, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc3(F.gelu(self.fc2(F.gelu(self.fc1(x)))))


class MaskDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dim = cfg.embed_dim
        g = cfg.grid_size
        self.grid_size = g
        self.logit_size = cfg.logit_size
        self.sam_token = nn.Parameter(torch.randn(dim) * 0.02)
        self.image_pe = nn.Parameter(torch.randn(g * g, dim) * 0.02)
        self.layers = nn.ModuleList(TwoWayLayer(dim, cfg.num_heads) for _ in range(2))
        self.final_norm = nn.LayerNorm(dim)

        steps = int(math.log2(cfg.patch_size // cfg.mask_stride))
        ups: list[nn.Module] = []
        ch = dim
        for _ in range(steps):
            nxt = max(ch // 2, 8)
            ups += [nn.ConvTranspose2d(ch, nxt, kernel_size=2, stride=2),
                    LayerNorm2d(nxt), nn.GELU()]
            ch = nxt
        if steps == 0:
            nxt = max(dim // 2, 8)
            ups += [nn.Conv2d(dim, nxt, kernel_size=1), nn.GELU()]
            ch = nxt
        self.mask_channels = ch
        self.upscale = nn.Sequential(*ups)
        self.sam_hyper = HyperMLP(dim, ch)

        # High-quality branch: fuses early encoder features with mask features.
        self.hq_token = nn.Parameter(torch.randn(dim) * 0.02)
        self.hq_early_proj = nn.Conv2d(dim, ch, kernel_size=1)
        self.hq_feat_proj = nn.Conv2d(ch, ch, kernel_size=1)
        self.hq_fuse = nn.Sequential(
            nn.Conv2d(ch, ch, kernel_size=3, padding=1), nn.GELU(),
            nn.Conv2d(ch, ch, kernel_size=3, padding=1),
        )
        self.hq_hyper = HyperMLP(dim, ch)

    def forward(self, enc: EncoderOutput, prompt_tokens: torch.Tensor) -> DecoderOutput:
        c, g, _ = enc.final_embedding.shape
        image = enc.final_embedding.reshape(c, g * g).transpose(0, 1)  # (N, C)
        tokens = torch.cat([self.sam_token[None], self.hq_token[None], prompt_tokens])
        for layer in self.layers:
            tokens, image = layer(tokens, image, self.image_pe)
        tokens = self.final_norm(tokens)
        sam_tok, hq_tok = tokens[0], tokens[1]

        image_grid = image.transpose(0, 1).reshape(c, g, g)
        mask_feat = self.upscale(image_grid)  # (ch, S, S)
        sam_logits = torch.einsum("c,chw->hw", self.sam_hyper(sam_tok), mask_feat)

        early = self.hq_early_proj(enc.early_features)
        if early.shape[-1] != mask_feat.shape[-1]:
            early = F.interpolate(early[None], size=mask_feat.shape[-2:],
                                  mode="bilinear", align_corners=False)[0]
        hq_feat = self.hq_fuse(early + self.hq_feat_proj(mask_feat))
        hq_logits = torch.einsum("c,chw->hw", self.hq_hyper(hq_tok), hq_feat)
        return DecoderOutput(sam_logits=sam_logits, hq_logits=hq_logits,
                             sam_token=sam_tok, hq_token=hq_tok)


def decode(state: ModelState, enc: EncoderOutput, prompt_tokens: torch.Tensor) -> DecoderOutput:
    """Run both decoder heads on an encoded image and prompt token sequence."""
    g = state.config.grid_size
    if enc.final_embedding.shape != (state.config.embed_dim, g, g):
        raise InputError(
            f"final_embedding shape {tuple(enc.final_embedding.shape)} does not match "
            f"config ({state.config.embed_dim}, {g}, {g})"
        )
    if prompt_tokens.shape[-1] != state.config.embed_dim:
        raise InputError(
            f"prompt token dim {prompt_tokens.shape[-1]} != embed_dim {state.config.embed_dim}"
        )
    return state.network.decoder(enc, prompt_tokens)


def upsample_logits(grid: MaskGrid, target_h: int, target_w: int) -> MaskGrid:
    """Bilinearly resample a logit grid to the target size."""
    if grid.kind != LOGITS:
        raise InputError("upsample_logits requires a logit-kind MaskGrid")
    if target_h <= 0 or target_w <= 0:
        raise InputError(f"non-positive target size ({target_h}, {target_w})")
    if (target_h, target_w) == grid.shape:
        return MaskGrid(grid.values.copy(), kind=LOGITS)
    t = torch.from_numpy(grid.values)[None, None]
    out = F.interpolate(t, size=(target_h, target_w), mode="bilinear", align_corners=False)
    return MaskGrid(out[0, 0].numpy(), kind=LOGITS)


def binarize(grid: MaskGrid, threshold: float = 0.0) -> MaskGrid:
    """Strictly-greater thresholding of logits into a binary mask."""
    if grid.kind != LOGITS:
        raise InputError("binarize requires a logit-kind MaskGrid")
    return MaskGrid((grid.values > threshold).astype("uint8"), kind=BINARY)
