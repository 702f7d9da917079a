"""Overlapping spatiotemporal patches: extraction on a regular grid and
splicing back by plain averaging of overlaps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .tensor import ContractViolation


def axis_origins(extent: int, size: int, stride: int) -> List[int]:
    """Origins ``0, stride, 2*stride, ...`` with the last one clamped to ``extent - size``."""
    if size > extent:
        raise ContractViolation(f"patch size {size} exceeds extent {extent}")
    origins = list(range(0, extent - size + 1, stride))
    if origins[-1] != extent - size:
        origins.append(extent - size)
    return origins


@dataclass
class PatchGrid:
    patch_h: int = 64
    patch_w: int = 64
    patch_t: int = 20
    stride_h: int = 32
    stride_w: int = 32
    stride_t: int = 10
    origins: List[Tuple[int, int, int]] = field(default_factory=list)

    def __post_init__(self):
        for name in ("patch_h", "patch_w", "patch_t", "stride_h", "stride_w", "stride_t"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be >= 1")

    @classmethod
    def with_overlap(cls, patch: int = 64, patch_frames: int = 20, overlap: float = 0.5) -> "PatchGrid":
        """Square patches whose neighbours share ``overlap`` of their extent on every axis."""
        if not 0.0 <= overlap < 1.0:
            raise ContractViolation(f"overlap must be in [0, 1), got {overlap}")
        s = max(1, int(round(patch * (1 - overlap))))
        st = max(1, int(round(patch_frames * (1 - overlap))))
        return cls(patch, patch, patch_frames, s, s, st)

    def fit(self, shape: Sequence[int]) -> "PatchGrid":
        """Return a copy whose ``origins`` cover a ``(T, 1, H, W)`` volume, row-major in (t, y, x)."""
        t, c, h, w = _video_shape(shape)
        for axis, extent, size in (("T", t, self.patch_t), ("H", h, self.patch_h), ("W", w, self.patch_w)):
            if extent < size:
                raise ContractViolation(f"input too small along {axis}: {extent} < patch size {size}")
        ts = axis_origins(t, self.patch_t, self.stride_t)
        ys = axis_origins(h, self.patch_h, self.stride_h)
        xs = axis_origins(w, self.patch_w, self.stride_w)
        origins = [(a, b, c) for a in ts for b in ys for c in xs]
        return PatchGrid(self.patch_h, self.patch_w, self.patch_t, self.stride_h, self.stride_w, self.stride_t, origins)

    def window(self, origin) -> tuple:
        t0, y0, x0 = origin
        return (slice(t0, t0 + self.patch_t), slice(None), slice(y0, y0 + self.patch_h), slice(x0, x0 + self.patch_w))


def _video_shape(shape) -> tuple:
    shape = tuple(shape)
    if len(shape) != 4 or shape[1] != 1:
        raise ContractViolation(f"expected a (T, 1, H, W) volume, got shape {shape}")
    return shape


def extract(seq: np.ndarray, grid: PatchGrid) -> List[np.ndarray]:
    """Copy out every patch of ``seq`` at the grid origins (fitted if empty)."""
    seq = np.asarray(seq)
    if not grid.origins:
        grid = grid.fit(seq.shape)
    else:
        _video_shape(seq.shape)
    return [np.array(seq[grid.window(o)]) for o in grid.origins]


def coverage(grid: PatchGrid, out_shape) -> np.ndarray:
    """Number of patches covering each voxel."""
    count = np.zeros(_video_shape(out_shape), dtype=np.int32)
    for o in grid.origins:
        count[grid.window(o)] += 1
    return count


def splice(patches: Sequence[np.ndarray], grid: PatchGrid, out_shape) -> np.ndarray:
    """Average overlapping patches back into a ``(T, 1, H, W)`` volume.

    Accumulation runs in float64 in the fixed origin order, so the result is
    bit-stable however the patches were produced.
    """
    out_shape = _video_shape(out_shape)
    if not grid.origins:
        grid = grid.fit(out_shape)
    if len(patches) != len(grid.origins):
        raise ContractViolation(f"splice: got {len(patches)} patches for a grid of {len(grid.origins)}")
    want = (grid.patch_t, 1, grid.patch_h, grid.patch_w)
    acc = np.zeros(out_shape, dtype=np.float64)
    count = np.zeros(out_shape, dtype=np.int32)
    for i, (o, p) in enumerate(zip(grid.origins, patches)):
        p = np.asarray(p)
        if p.shape != want:
            raise ContractViolation(f"splice: patch {i} has shape {p.shape}, expected {want}")
        win = grid.window(o)
        acc[win] += p
        count[win] += 1
    if (count == 0).any():
        raise ContractViolation("splice: grid does not cover the output volume")
    return (acc / count).astype(np.float32)
