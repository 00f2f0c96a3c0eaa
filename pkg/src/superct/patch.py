"""Overlapping square patch extraction and its adjoint."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass(frozen=True)
class PatchConfig:
    side: int = 8
    stride: int = 1

    def __post_init__(self):
        if self.side < 1 or not 1 <= self.stride <= self.side:
            raise ValueError("need side >= 1 and 1 <= stride <= side")

    @property
    def length(self) -> int:
        return self.side * self.side

    def grid(self, image_size) -> tuple[int, int]:
        """Number of patch positions along each image axis."""
        h, w = image_size
        if h < self.side or w < self.side:
            raise ValueError(f"image {tuple(image_size)} smaller than patch side {self.side}")
        return ((h - self.side) // self.stride + 1, (w - self.side) // self.stride + 1)

    def count(self, image_size) -> int:
        nr, nc = self.grid(image_size)
        return nr * nc


def extract_patches(img, cfg: PatchConfig) -> np.ndarray:
    """Columns are vectorized patches in row-major patch order, shape (l, J)."""
    img = np.asarray(img, dtype=np.float64)
    nr, nc = cfg.grid(img.shape)
    s = cfg.stride
    win = sliding_window_view(img, (cfg.side, cfg.side))[: (nr - 1) * s + 1 : s, : (nc - 1) * s + 1 : s]
    return win.reshape(nr * nc, cfg.length).T.copy()


def aggregate_patches(patches, cfg: PatchConfig, image_size) -> np.ndarray:
    """Adjoint of :func:`extract_patches`: sum each column back into place."""
    patches = np.asarray(patches, dtype=np.float64)
    nr, nc = cfg.grid(image_size)
    if patches.shape != (cfg.length, nr * nc):
        raise ValueError(f"expected patches of shape {(cfg.length, nr * nc)}, got {patches.shape}")
    out = np.zeros(tuple(image_size))
    s, p = cfg.stride, cfg.side
    span_r, span_c = (nr - 1) * s + 1, (nc - 1) * s + 1
    blocks = patches.reshape(p, p, nr, nc)
    for di in range(p):
        for dj in range(p):
            out[di : di + span_r : s, dj : dj + span_c : s] += blocks[di, dj]
    return out


def patch_weight(cfg: PatchConfig, image_size) -> np.ndarray:
    """Per-pixel patch coverage, the diagonal of sum_j P_j^T P_j."""
    return aggregate_patches(np.ones((cfg.length, cfg.count(image_size))), cfg, image_size)
