"""Image volumes and label maps with physical voxel spacing."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

LABELS = (0, 1, 2, 3, 4)
BACKGROUND, CAVITY, MYOCARDIUM, INFARCTION, NO_REFLOW = LABELS


class GeometryError(ValueError):
    """Extents or spacing of two objects that must agree do not."""


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar image indexed ``[x, y, z]`` with spacing in mm."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    case_id: str = ""

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.ndim != 3:
            raise GeometryError(f"volume must be 3D, got shape {vox.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 for s in spacing):
            raise GeometryError(f"spacing must be three positive values, got {self.spacing}")
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing", spacing)

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def same_geometry(self, other: "Volume") -> bool:
        return self.extents == other.extents and np.allclose(self.spacing, other.spacing, rtol=1e-6, atol=0)

    def check_geometry(self, other: "Volume") -> None:
        if not self.same_geometry(other):
            raise GeometryError(
                f"geometry mismatch: {self.extents} @ {self.spacing} vs {other.extents} @ {other.spacing}"
            )

    def with_voxels(self, voxels: np.ndarray) -> "Volume":
        return type(self)(voxels, self.spacing, self.case_id)

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.case_id == other.case_id
            and self.voxels.dtype == other.voxels.dtype
            and np.array_equal(self.voxels, other.voxels)
        )


@dataclass(frozen=True, eq=False)
class LabelMap(Volume):
    """Integer labels 0 (background) .. 4 (no-reflow)."""

    def __post_init__(self):
        super().__post_init__()
        vox = self.voxels
        if not np.issubdtype(vox.dtype, np.integer):
            if not np.all(np.mod(vox, 1) == 0):
                raise ValueError("label map holds non-integer values")
        if vox.size and (vox.min() < 0 or vox.max() > 4):
            raise ValueError(f"labels must lie in 0..4, found range {vox.min()}..{vox.max()}")
        object.__setattr__(self, "voxels", vox.astype(np.uint8, copy=False))

    @property
    def labels(self) -> np.ndarray:
        return self.voxels


def zscore_normalize(v: Volume, eps: float = 1e-8) -> Volume:
    """Whole-volume zero mean / unit variance; constant volumes become zeros."""
    if v.voxels.size < 2:
        raise ValueError("z-score normalization needs at least 2 voxels")
    x = v.voxels.astype(np.float64)
    centered = x - x.mean()
    std = centered.std()
    out = centered / max(std, eps)
    dtype = v.voxels.dtype if np.issubdtype(v.voxels.dtype, np.floating) else np.float32
    return Volume(out.astype(dtype), v.spacing, v.case_id)


def extract_slices(v: Volume) -> list[np.ndarray]:
    """The z-planes of ``v`` in order, each ``[nx, ny]``."""
    return [v.voxels[:, :, k].copy() for k in range(v.voxels.shape[2])]


def stack_slices(
    slices: Sequence[np.ndarray], spacing: Sequence[float] = (1.0, 1.0, 1.0), case_id: str = ""
) -> Volume:
    if not slices:
        raise GeometryError("cannot stack an empty slice list")
    shape = slices[0].shape
    for k, s in enumerate(slices):
        if s.ndim != 2 or s.shape != shape:
            raise GeometryError(f"slice {k} has shape {s.shape}, expected {shape}")
    return Volume(np.stack(slices, axis=2), tuple(spacing), case_id)
