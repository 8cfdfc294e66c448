"""Overlapping cubic patch grids for full-volume inference.

Patch origins step by `stride` along each axis; the final origin is
clamped to dim - patch_edge so every voxel is covered at least once.
Patches are blended back with a separable raised-cosine (Hann) window,
floored at 1e-3 so no voxel weight is ever zero, and normalized by the
accumulated weight, which suppresses seam artifacts that uniform
averaging leaves behind.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError

WINDOW_FLOOR = 1e-3


def _axis_origins(dim: int, patch_edge: int, stride: int) -> list[int]:
    origins = list(range(0, dim - patch_edge + 1, stride))
    if origins[-1] != dim - patch_edge:
        origins.append(dim - patch_edge)
    return origins


def blend_window(patch_edge: int) -> np.ndarray:
    """Separable 3D Hann window with a strictly positive floor."""
    i = np.arange(patch_edge)
    # half-sample offset keeps endpoint weights nonzero even before the floor
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * (i + 0.5) / patch_edge)
    w = np.maximum(w, WINDOW_FLOOR)
    return w[:, None, None] * w[None, :, None] * w[None, None, :]


@dataclass
class PatchGrid:
    patch_edge: int
    stride: int
    origins: list[tuple[int, int, int]]
    window: np.ndarray
    source_dims: tuple[int, int, int]

    def __len__(self) -> int:
        return len(self.origins)


def plan_patches(dims: tuple[int, int, int], patch_edge: int, stride: int) -> PatchGrid:
    dims = tuple(int(d) for d in dims)
    patch_edge = int(patch_edge)
    stride = int(stride)
    if any(patch_edge > d for d in dims):
        raise ParameterError(f"patch_edge {patch_edge} exceeds dims {dims}")
    if not (1 <= stride <= patch_edge):
        raise ParameterError(f"stride must be in [1, patch_edge], got {stride}")
    per_axis = [_axis_origins(d, patch_edge, stride) for d in dims]
    origins = [(ox, oy, oz) for ox in per_axis[0] for oy in per_axis[1] for oz in per_axis[2]]
    return PatchGrid(patch_edge, stride, origins, blend_window(patch_edge), dims)


def extract(data: np.ndarray, grid: PatchGrid) -> list[np.ndarray]:
    if tuple(data.shape) != grid.source_dims:
        raise ShapeError(f"data shape {data.shape} does not match grid dims {grid.source_dims}")
    e = grid.patch_edge
    return [data[ox : ox + e, oy : oy + e, oz : oz + e].copy() for ox, oy, oz in grid.origins]


def stitch(patches: list[np.ndarray], grid: PatchGrid) -> np.ndarray:
    """Weighted-average reassembly: out(v) = sum_i w_i(v) p_i(v) / sum_i w_i(v)."""
    if len(patches) != len(grid.origins):
        raise ShapeError(f"{len(patches)} patches for {len(grid.origins)} grid origins")
    e = grid.patch_edge
    num = np.zeros(grid.source_dims, dtype=np.float64)
    den = np.zeros(grid.source_dims, dtype=np.float64)
    for patch, (ox, oy, oz) in zip(patches, grid.origins):
        patch = np.asarray(patch)
        if patch.shape != (e, e, e):
            raise ShapeError(f"patch shape {patch.shape} does not match edge {e}")
        sl = (slice(ox, ox + e), slice(oy, oy + e), slice(oz, oz + e))
        num[sl] += grid.window * patch
        den[sl] += grid.window
    return (num / den).astype(np.float32)


def accumulated_weights(grid: PatchGrid) -> np.ndarray:
    """Raw (pre-normalization) blend weight per voxel; positive everywhere."""
    den = np.zeros(grid.source_dims, dtype=np.float64)
    e = grid.patch_edge
    for ox, oy, oz in grid.origins:
        den[ox : ox + e, oy : oy + e, oz : oz + e] += grid.window
    return den
