"""MaskGrid: a 2-D grid of logits or binary occupancy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError

LOGITS = "logits"
BINARY = "binary"


@dataclass
class MaskGrid:
    values: np.ndarray  # (H, W); float32 for logits, uint8 {0,1} for binary
    kind: str = LOGITS

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise InputError(f"MaskGrid values must be 2-D, got shape {self.values.shape}")
        if self.kind == LOGITS:
            self.values = self.values.astype(np.float32, copy=False)
        elif self.kind == BINARY:
            v = self.values
            if v.dtype == bool:
                v = v.astype(np.uint8)
            if not np.isin(v, (0, 1)).all():
                raise InputError("binary MaskGrid may only contain {0, 1}")
            self.values = v.astype(np.uint8, copy=False)
        else:
            raise InputError(f"unknown MaskGrid kind {self.kind!r}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def as_bool(self) -> np.ndarray:
        if self.kind != BINARY:
            raise InputError("as_bool requires a binary MaskGrid")
        return self.values.astype(bool)

    @classmethod
    def from_bool(cls, mask: np.ndarray) -> "MaskGrid":
        return cls(np.asarray(mask).astype(np.uint8), kind=BINARY)
