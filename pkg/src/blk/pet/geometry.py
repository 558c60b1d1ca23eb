"""Cylindrical scanner layout and the voxel grid.

Detector id = ring * detectors_per_ring + index_in_ring.  Detector centers
sit on a circle of radius ring_radius; rings are spaced by the pitch and
centered on z = 0.  When no radius is given it is derived from the in-ring
pitch, ring_radius = detectors_per_ring * pitch / (2 pi), so neighboring
crystals are pitch apart along the circumference.

Image voxels are linearized x-fastest: flat = ix + nx*(iy + ny*iz).  The
origin names the center of voxel (0, 0, 0); the default grid is centered on
the scanner axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class ScannerGeometry:
    rings: int
    detectors_per_ring: int
    pitch: float                       # mm, in-ring and ring-to-ring
    ring_radius: Optional[float] = None
    crystal_face: float = 2.0          # mm, metadata only
    crystal_length: float = 12.0       # mm radial, metadata only

    def __post_init__(self):
        if self.rings < 1 or self.detectors_per_ring < 1:
            raise GeometryError("scanner needs at least one ring and one detector")
        if self.pitch <= 0:
            raise GeometryError("pitch must be positive")
        if self.ring_radius is None:
            object.__setattr__(
                self, "ring_radius", self.detectors_per_ring * self.pitch / (2.0 * np.pi)
            )
        if self.ring_radius <= 0:
            raise GeometryError("ring radius must be positive")

    @property
    def n_detectors(self) -> int:
        return self.rings * self.detectors_per_ring

    def positions(self, ids) -> np.ndarray:
        """Detector center coordinates, shape (..., 3), mm."""
        ids = np.asarray(ids)
        if np.any(ids < 0) or np.any(ids >= self.n_detectors):
            raise GeometryError("detector id out of range")
        ring = ids // self.detectors_per_ring
        k = ids % self.detectors_per_ring
        angle = 2.0 * np.pi * k / self.detectors_per_ring
        x = self.ring_radius * np.cos(angle)
        y = self.ring_radius * np.sin(angle)
        z = (ring - (self.rings - 1) / 2.0) * self.pitch
        return np.stack([x, y, z], axis=-1)

    @classmethod
    def full_preset(cls) -> "ScannerGeometry":
        return cls(rings=91, detectors_per_ring=180, pitch=2.2)


@dataclass
class Image3D:
    dims: Tuple[int, int, int]
    voxel_size: Tuple[float, float, float]
    origin: Tuple[float, float, float]
    data: np.ndarray = None

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.voxel_size = tuple(float(v) for v in self.voxel_size)
        self.origin = tuple(float(o) for o in self.origin)
        if any(d < 1 for d in self.dims):
            raise GeometryError("image dims must be positive")
        if any(v <= 0 for v in self.voxel_size):
            raise GeometryError("voxel size must be positive")
        n = self.dims[0] * self.dims[1] * self.dims[2]
        if self.data is None:
            self.data = np.zeros(n, dtype=np.float64)
        else:
            self.data = np.asarray(self.data, dtype=np.float64).reshape(n)

    @classmethod
    def centered(cls, dims, voxel_size, fill: float = 0.0) -> "Image3D":
        dims = tuple(int(d) for d in dims)
        voxel_size = tuple(float(v) for v in voxel_size)
        origin = tuple(-(d - 1) / 2.0 * v for d, v in zip(dims, voxel_size))
        img = cls(dims=dims, voxel_size=voxel_size, origin=origin)
        if fill:
            img.data[:] = fill
        return img

    @classmethod
    def full_preset(cls, fill: float = 0.0) -> "Image3D":
        return cls.centered((90, 90, 50), (0.7, 0.7, 0.7), fill=fill)

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def copy(self) -> "Image3D":
        return Image3D(
            dims=self.dims, voxel_size=self.voxel_size, origin=self.origin,
            data=self.data.copy(),
        )

    def like(self, fill: float = 0.0) -> "Image3D":
        img = Image3D(dims=self.dims, voxel_size=self.voxel_size, origin=self.origin)
        if fill:
            img.data[:] = fill
        return img

    def flat_index(self, ix, iy, iz):
        nx, ny, _ = self.dims
        return ix + nx * (iy + ny * iz)

    def voxel_center(self, ix, iy, iz) -> np.ndarray:
        return np.array(
            [
                self.origin[0] + ix * self.voxel_size[0],
                self.origin[1] + iy * self.voxel_size[1],
                self.origin[2] + iz * self.voxel_size[2],
            ]
        )

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        """Axis-aligned bounding box (lo, hi) of the voxelized volume."""
        o = np.array(self.origin)
        v = np.array(self.voxel_size)
        d = np.array(self.dims)
        lo = o - 0.5 * v
        hi = o + (d - 0.5) * v
        return lo, hi

    def as_3d(self) -> np.ndarray:
        """View in (ix, iy, iz) axis order."""
        nx, ny, nz = self.dims
        return self.data.reshape(nz, ny, nx).transpose(2, 1, 0)
