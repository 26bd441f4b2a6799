"""Patch masking: iid random masking for the MAE path, multiblock masking
for the JEPA path, and patch subselection for the latent loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class MaskSpec:
    mode: str = "random_iid"  # or "multiblock"
    mask_ratio: float = 0.95
    num_blocks: int = 8
    block_area_range: tuple = (0.3, 0.3)
    aspect_ratio_range: tuple = (0.75, 1.50)

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must be in [0, 1)")
        if self.mode not in ("random_iid", "multiblock"):
            raise ValueError(f"unknown masking mode {self.mode!r}")


def random_mask(n_tokens: int, ratio: float, rng: np.random.Generator):
    """Keep a uniform random subset of max(1, round((1-ratio)*n)) tokens.

    Returns sorted ascending indices.
    """
    if n_tokens < 1:
        raise ValueError("need at least one token")
    n_keep = max(1, round((1.0 - ratio) * n_tokens))
    if n_keep >= n_tokens:
        return np.arange(n_tokens, dtype=np.intp)
    keep = rng.choice(n_tokens, size=n_keep, replace=False)
    return np.sort(keep).astype(np.intp)


def multiblock_mask(grid, spec: MaskSpec, rng: np.random.Generator):
    """Union of rectangular spatial blocks, extended across all time steps.

    Returns a boolean (T', H', W') array; True marks masked patches.
    """
    t, h, w = (int(g) for g in grid)
    if h < 2 or w < 2:
        raise ValueError("multiblock needs a spatial grid of at least 2x2")
    spatial = np.zeros((h, w), dtype=bool)
    for _ in range(spec.num_blocks):
        area_frac = rng.uniform(*spec.block_area_range)
        aspect = rng.uniform(*spec.aspect_ratio_range)
        area = area_frac * h * w
        # aspect = block_h / block_w
        bh = min(h, max(1, round(np.sqrt(area * aspect))))
        bw = min(w, max(1, round(np.sqrt(area / aspect))))
        top = int(rng.integers(0, h - bh + 1))
        left = int(rng.integers(0, w - bw + 1))
        spatial[top : top + bh, left : left + bw] = True
    return np.broadcast_to(spatial, (t, h, w)).copy()


def subsample_latent_patches(n_tokens: int, fraction: float, rng: np.random.Generator):
    """ceil(fraction * n) uniform indices without replacement, sorted."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    if fraction == 1.0:
        return np.arange(n_tokens, dtype=np.intp)
    n_pick = int(np.ceil(fraction * n_tokens))
    idx = rng.choice(n_tokens, size=n_pick, replace=False)
    return np.sort(idx).astype(np.intp)
