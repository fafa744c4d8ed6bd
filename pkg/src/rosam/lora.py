"""Low-rank adaptation of the encoder's Q/V projections.

Forward rule: h = W0 x + Wd We x, computed as two thin products. Wd starts at
zero so a freshly injected model reproduces the base forward pass exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, InputError, StateError
from .model import Attention, ModelState


@dataclass
class LoraPair:
    We: np.ndarray  # (r, n)
    Wd: np.ndarray  # (m, r)
    target: str = ""

    def __post_init__(self):
        self.We = np.asarray(self.We, dtype=np.float64)
        self.Wd = np.asarray(self.Wd, dtype=np.float64)
        if self.We.ndim != 2 or self.Wd.ndim != 2:
            raise InputError("We and Wd must be matrices")
        if self.We.shape[0] != self.Wd.shape[1]:
            raise InputError(
                f"rank mismatch: We is {self.We.shape}, Wd is {self.Wd.shape}"
            )

    @property
    def rank(self) -> int:
        return self.We.shape[0]


class LoRALinear(nn.Module):
    """A Linear layer with a parallel low-rank branch (no scaling factor)."""

    def __init__(self, base: nn.Linear, rank: int, generator: torch.Generator):
        super().__init__()
        m, n = base.weight.shape
        if not 0 < rank < min(m, n):
            raise ConfigurationError(
                f"lora rank ({rank}) must satisfy 0 < r < min({m}, {n})"
            )
        self.base = base
        self.lora_down = nn.Linear(n, rank, bias=False)  # We
        self.lora_up = nn.Linear(rank, m, bias=False)  # Wd
        with torch.no_grad():
            self.lora_down.weight.copy_(
                torch.randn(rank, n, generator=generator) * 0.02
            )
            self.lora_up.weight.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.lora_up(self.lora_down(x))


def lora_forward(x: np.ndarray, W0: np.ndarray, pair: LoraPair) -> np.ndarray:
    """h = W0 x + Wd (We x), without ever materializing Wd We."""
    x = np.asarray(x, dtype=np.float64)
    W0 = np.asarray(W0, dtype=np.float64)
    m, n = W0.shape
    if pair.We.shape[1] != n or pair.Wd.shape[0] != m:
        raise InputError(
            f"pair shapes {pair.We.shape}/{pair.Wd.shape} do not conform to W0 {W0.shape}"
        )
    if x.shape[0] != n:
        raise InputError(f"input of length {x.shape[0]} does not match W0 columns {n}")
    return W0 @ x + pair.Wd @ (pair.We @ x)


def merge_lora(W0: np.ndarray, pair: LoraPair) -> np.ndarray:
    """W0 + Wd We: the adapter folded into the base weight."""
    W0 = np.asarray(W0, dtype=np.float64)
    m, n = W0.shape
    if pair.We.shape[1] != n or pair.Wd.shape[0] != m:
        raise InputError(
            f"pair shapes {pair.We.shape}/{pair.Wd.shape} do not conform to W0 {W0.shape}"
        )
    return W0 + pair.Wd @ pair.We


def inject_lora(state: ModelState, rank: int) -> ModelState:
    """Wrap every encoder attention Q and V projection with a low-rank branch.

    Mutates the network in place (the state owns its parameters) and returns
    the same state for chaining. K and the output projection are untouched.
    """
    if state.lora_injected:
        raise StateError("adapters already injected into this model")
    generator = torch.Generator().manual_seed(state.config.seed + 1)
    for module in state.network.encoder.modules():
        if isinstance(module, Attention):
            module.q_proj = LoRALinear(module.q_proj, rank, generator)
            module.v_proj = LoRALinear(module.v_proj, rank, generator)
    for name, p in state.network.named_parameters():
        if "lora_" not in name:
            p.requires_grad_(False)
    state.lora_injected = True
    return state


def merge_lora_into_model(state: ModelState) -> ModelState:
    """Return a new state with every adapter folded into its base weight and removed."""
    import copy

    merged = copy.deepcopy(state)
    for module in merged.network.encoder.modules():
        if isinstance(module, Attention):
            for attr in ("q_proj", "v_proj"):
                layer = getattr(module, attr)
                if isinstance(layer, LoRALinear):
                    with torch.no_grad():
                        layer.base.weight += layer.lora_up.weight @ layer.lora_down.weight
                    setattr(module, attr, layer.base)
    merged.lora_injected = False
    return merged


def adapter_parameters(state: ModelState) -> list[str]:
    """Names of every We/Wd parameter; empty before injection."""
    return [name for name, _ in state.network.named_parameters() if "lora_" in name]
