"""Classical 2D lattice gradient noise and multi-scale cloud-mask composition.

A gradient grid holds one 2D vector per lattice vertex. Noise at a point is
the fade-blended sum of ramp values (displacement-dot-gradient) from the four
surrounding vertices. Five grids of different cell counts render to masks
that are mixed, normalized, and scaled into the final cloud opacity mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class GradientGrid:
    """An n x n cell grid with (n+1) x (n+1) gradient vectors.

    ``vectors[ix, iy]`` is the 2D gradient at lattice point (ix, iy); classical
    grids carry unit vectors, generator-produced grids have components in
    [-1, 1] with no norm constraint.
    """

    vectors: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.vectors, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] != arr.shape[1] or arr.shape[2] != 2 or arr.shape[0] < 2:
            raise ValueError(f"expected (n+1, n+1, 2) vector array with n >= 1, got {arr.shape}")
        object.__setattr__(self, "vectors", arr)

    @property
    def cells(self) -> int:
        return self.vectors.shape[0] - 1


@dataclass(frozen=True)
class Mask:
    """Per-pixel opacity values, (H, W) single-channel or (H, W, 3) after channel effects."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] != 3):
            raise ValueError(f"expected (H, W) or (H, W, 3) mask, got {arr.shape}")
        object.__setattr__(self, "values", arr)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.values.ndim == 2 else 3


@dataclass(frozen=True)
class ChannelEffectConfig:
    """Per-channel pixel shifts and magnitude factors applied to the mask.

    Mimics the slight spectral-band misalignment and per-band brightness of
    real multi-channel cloud imagery. Magnitudes must lie in (0, 1] so mask
    values stay within [0, t].
    """

    offsets: tuple = ((0, 0), (0, 0), (0, 0))
    magnitudes: tuple = (1.0, 1.0, 1.0)
    max_offset: int = 2

    def __post_init__(self):
        if len(self.offsets) != 3 or len(self.magnitudes) != 3:
            raise ValueError("need exactly 3 offsets and 3 magnitudes")
        for dx, dy in self.offsets:
            if abs(int(dx)) > self.max_offset or abs(int(dy)) > self.max_offset:
                raise ValueError(f"offset ({dx},{dy}) exceeds max {self.max_offset}")
        for m in self.magnitudes:
            if not 0.0 < m <= 1.0:
                raise ValueError(f"magnitude {m} outside (0, 1]")

    @classmethod
    def sample(cls, rng: np.random.Generator, max_offset: int = 2,
               magnitudes: tuple = (1.0, 0.97, 0.94)) -> "ChannelEffectConfig":
        """Draw integer offsets uniformly from {-max_offset..max_offset} per channel."""
        offs = tuple(
            (int(rng.integers(-max_offset, max_offset + 1)),
             int(rng.integers(-max_offset, max_offset + 1)))
            for _ in range(3)
        )
        return cls(offsets=offs, magnitudes=tuple(magnitudes), max_offset=max_offset)


def random_unit_grid(n: int, seed) -> GradientGrid:
    """Assign an independent uniform unit vector to every lattice vertex."""
    if n < 1:
        raise ValueError("grid must have at least one cell")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=(n + 1, n + 1))
    return GradientGrid(np.stack([np.cos(theta), np.sin(theta)], axis=-1))


def fade(t):
    """Smooth interpolation weight 3t^2 - 2t^3; inputs are clamped to [0, 1]."""
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def perlin_value(grid: GradientGrid, x: float, y: float) -> float:
    """Noise value at cell coordinates (x, y), 0 <= x, y < n.

    Displacements from the four surrounding vertices are dotted with their
    gradients and blended with the separable fade weights.
    """
    n = grid.cells
    if not (0.0 <= x < n and 0.0 <= y < n):
        raise ValueError(f"point ({x}, {y}) outside grid of {n} cells")
    l, d = int(np.floor(x)), int(np.floor(y))
    dx, dy = x - l, y - d
    g = grid.vectors

    def ramp(ix, iy, px, py):
        return g[ix, iy, 0] * px + g[ix, iy, 1] * py

    s_ld = ramp(l, d, dx, dy)
    s_rd = ramp(l + 1, d, dx - 1.0, dy)
    s_lu = ramp(l, d + 1, dx, dy - 1.0)
    s_ru = ramp(l + 1, d + 1, dx - 1.0, dy - 1.0)
    fx, fy = fade(dx), fade(dy)
    cfx, cfy = fade(1.0 - dx), fade(1.0 - dy)
    return float(cfx * cfy * s_ld + fx * cfy * s_rd + cfx * fy * s_lu + fx * fy * s_ru)


@lru_cache(maxsize=64)
def _render_plan(n: int, height: int, width: int):
    """Grid-independent geometry for render_mask, cached per (n, H, W).

    For each pixel and each of its four surrounding vertices this bakes the
    flat vertex index and the fade-weighted displacement components, so a
    render reduces to one gather and a fused multiply-sum over the grid's
    gradient vectors.
    """
    x = np.repeat((np.arange(width) + 0.5)[None, :] / width * n, height, axis=0).ravel()
    y = np.repeat((np.arange(height) + 0.5)[:, None] / height * n, width, axis=1).ravel()
    l = np.floor(x).astype(np.intp)
    d = np.floor(y).astype(np.intp)
    dx = x - l
    dy = y - d
    fx, fy = fade(dx), fade(dy)
    cfx, cfy = 1.0 - fx, 1.0 - fy  # fade(1-t) == 1 - fade(t) for this cubic
    stride = n + 1
    indices, weighted = [], []
    for ox, oy, w in ((0, 0, cfx * cfy), (1, 0, fx * cfy),
                      (0, 1, cfx * fy), (1, 1, fx * fy)):
        indices.append((l + ox) * stride + (d + oy))
        weighted.append(np.stack([w * (dx - ox), w * (dy - oy)], axis=-1))
    idx = np.stack(indices)
    wd = np.stack(weighted)
    idx.flags.writeable = False
    wd.flags.writeable = False
    return idx, wd


def render_mask(grid: GradientGrid, height: int, width: int) -> Mask:
    """Evaluate the grid at every pixel center, vectorized.

    Pixel (u, v) maps to cell coordinates ((u+0.5)/W*n, (v+0.5)/H*n); centers
    keep coordinates strictly inside the grid so the top/left lattice lines
    (where noise is identically zero) are never sampled exactly.
    """
    if height < 1 or width < 1:
        raise ValueError("mask dimensions must be positive")
    idx, wd = _render_plan(grid.cells, height, width)
    flat = grid.vectors.reshape(-1, 2)
    values = np.einsum("cpk,cpk->p", flat[idx], wd)
    return Mask(values.reshape(height, width))


def compose_masks(masks, k, t: float) -> Mask:
    """Weight, sum, normalize to [0, 1], and scale by thickness t.

    The weighted sum is shifted and scaled so its minimum maps to 0 and its
    maximum to t exactly; a constant sum (max == min) carries no cloud
    structure and yields the all-zero mask.
    """
    if len(masks) != len(k):
        raise ValueError(f"{len(masks)} masks but {len(k)} coefficients")
    if t < 0:
        raise ValueError("thickness must be nonnegative")
    shape = masks[0].values.shape
    for m in masks[1:]:
        if m.values.shape != shape:
            raise ValueError(f"mask shape mismatch: {m.values.shape} vs {shape}")
    total = np.zeros(shape, dtype=np.float64)
    for ki, mi in zip(k, masks):
        total += ki * mi.values
    lo = total.min()
    hi = total.max()
    if hi == lo:
        return Mask(np.zeros(shape, dtype=np.float64))
    return Mask(t * (total - lo) / (hi - lo))


def _shift_replicate(values: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Shift content by (dx, dy) pixels (positive = right/down), replicating edges."""
    h, w = values.shape
    rows = np.clip(np.arange(h) - dy, 0, h - 1)
    cols = np.clip(np.arange(w) - dx, 0, w - 1)
    return values[np.ix_(rows, cols)]


def apply_channel_effects(mask: Mask, cfg: ChannelEffectConfig) -> Mask:
    """Expand a single-channel mask to 3 channels with per-channel shift and scale."""
    if mask.channels != 1:
        raise ValueError("channel effects expect a single-channel mask")
    chans = [
        _shift_replicate(mask.values, int(dx), int(dy)) * m
        for (dx, dy), m in zip(cfg.offsets, cfg.magnitudes)
    ]
    return Mask(np.stack(chans, axis=-1))
