"""3D rotary positional embedding over a (time, height, width) patch grid.

The feature vector is partitioned into four contiguous parts
[time | height | width | unrotated]. Each rotated part gets a standard
1D RoPE frequency ladder driven by the position along its axis; the last
part carries no positional information. Rotations act on adjacent pairs,
so each part size is rounded to an even count and any remainder is
absorbed by the unrotated part.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T


class RopeConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RopeConfig:
    d_model: int
    fractions: tuple = (0.10, 0.25, 0.25)  # time, height, width
    max_wavelength: float = 10000.0
    apply_site: str = "post_first_norm"  # or "attention_qk"

    def __post_init__(self):
        if sum(self.fractions) > 1.0 + 1e-12:
            raise RopeConfigError("rotated fractions exceed 1")
        if self.apply_site not in ("post_first_norm", "attention_qk"):
            raise RopeConfigError(f"unknown apply_site {self.apply_site!r}")
        if sum(self.part_sizes()) > self.d_model:
            raise RopeConfigError("rounded part sizes exceed d_model")

    def part_sizes(self):
        """Even sizes of the (t, h, w) rotated parts."""
        return tuple(2 * round(f * self.d_model / 2) for f in self.fractions)


@dataclass
class RotationTable:
    """Per-axis cos/sin ladders for every grid position.

    cos[a] / sin[a] have shape (grid[a], part_sizes[a] // 2).
    """

    config: RopeConfig
    grid: tuple
    cos: list = field(repr=False, default=None)
    sin: list = field(repr=False, default=None)


def build_rotation_table(cfg: RopeConfig, grid) -> RotationTable:
    """Precompute the rotation angles for a (T', H', W') patch grid.

    Pair p of an axis with D_a rotated dims at position n uses angle
    n * max_wavelength**(-2p / D_a).
    """
    grid = tuple(int(g) for g in grid)
    if len(grid) != 3 or any(g < 1 for g in grid):
        raise RopeConfigError(f"bad grid {grid}")
    cos, sin = [], []
    for axis, d_a in enumerate(cfg.part_sizes()):
        n_pairs = d_a // 2
        pos = np.arange(grid[axis], dtype=np.float64)[:, None]
        freqs = cfg.max_wavelength ** (-2.0 * np.arange(n_pairs, dtype=np.float64) / d_a)
        ang = pos * freqs[None, :]
        cos.append(np.cos(ang))
        sin.append(np.sin(ang))
    return RotationTable(config=cfg, grid=grid, cos=cos, sin=sin)


def _gather_cos_sin(table: RotationTable, positions):
    """Full-width interleaved cos/sin arrays of shape (N, R) for R rotated dims."""
    positions = np.asarray(positions, dtype=np.intp)
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise RopeConfigError("positions must be (N, 3)")
    for axis in range(3):
        if positions[:, axis].min(initial=0) < 0 or (
            positions.size and positions[:, axis].max() >= table.grid[axis]
        ):
            raise IndexError(f"position outside grid along axis {axis}")
    cos_parts, sin_parts = [], []
    for axis in range(3):
        c = table.cos[axis][positions[:, axis]]  # (N, pairs)
        s = table.sin[axis][positions[:, axis]]
        cos_parts.append(np.repeat(c, 2, axis=1))
        sin_parts.append(np.repeat(s, 2, axis=1))
    return np.concatenate(cos_parts, axis=1), np.concatenate(sin_parts, axis=1)


def apply_rope(x, table: RotationTable, positions):
    """Rotate token features by their grid positions.

    x: Tensor[..., N, D]; positions: (N, 3) integer grid coordinates.
    The unrotated tail passes through unchanged. Differentiable in x.
    """
    x = T.as_tensor(x)
    d = x.shape[-1]
    if d != table.config.d_model:
        raise T.ShapeMismatchError("feature dim does not match RoPE config")
    r = sum(table.config.part_sizes())
    if r == 0:
        return x
    cos, sin = _gather_cos_sin(table, positions)  # (N, R) each
    n = x.shape[-2]
    if cos.shape[0] != n:
        raise T.ShapeMismatchError("positions length must match token count")

    xr = T.slice_axis(x, -1, 0, r)
    # Partner vector: (x0, x1) pairs mapped to (-x1, x0).
    pair = T.reshape(xr, xr.shape[:-1] + (r // 2, 2))
    x0 = T.slice_axis(pair, -1, 0, 1)
    x1 = T.slice_axis(pair, -1, 1, 2)
    partner = T.reshape(T.concat([T.neg(x1), x0], axis=-1), xr.shape)
    rotated = xr * cos + partner * sin
    if r == d:
        return rotated
    tail = T.slice_axis(x, -1, r, d)
    return T.concat([rotated, tail], axis=-1)
