"""Sphere-based excess and significance analysis of reconstructed images.

Two concentric spheres are centered on each voxel: the inner one holds the
candidate signal, the shell between inner and outer samples the local
background.  With S the inner-sphere sum and B the shell sum rescaled to
the inner voxel count,

    E  = (S - B) / B
    dE = (S / B) * sqrt(1/S + 1/B)

so E is zero on a uniform image and dE carries the Poisson uncertainty of
count-like data.  Voxel membership is a center-point test; sums iterate
only the axis-aligned bounding box of the outer sphere.  A voxel is marked
invalid when either sphere leaves the image or S or B is non-positive.

Feature finding keeps valid voxels whose significance E/dE clears the
threshold and is a strict local maximum over the 26-neighborhood.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .backend import Backend
from .pet.geometry import Image3D


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class SphereSpec:
    inner_diameter: float = 2.0  # mm
    outer_diameter: float = 4.0  # mm

    def __post_init__(self):
        if not 0 < self.inner_diameter < self.outer_diameter:
            raise AnalysisError("need 0 < inner diameter < outer diameter")


@dataclass
class ExcessMap:
    E: np.ndarray        # flat, x-fastest, like Image3D.data
    dE: np.ndarray
    valid: np.ndarray    # bool
    dims: Tuple[int, int, int]


def _box_ranges(center, radius_vox, dims):
    """Inclusive-exclusive index ranges of the bounding box, clipped to the
    image; also reports whether clipping occurred."""
    lo = []
    hi = []
    clipped = False
    for c, r, d in zip(center, radius_vox, dims):
        a = int(np.ceil(c - r))
        b = int(np.floor(c + r)) + 1
        if a < 0 or b > d:
            clipped = True
        lo.append(max(a, 0))
        hi.append(min(b, d))
    return lo, hi, clipped


def sphere_sums(image: Image3D, center, spec: SphereSpec):
    """(S, B_raw, n_in, n_shell) from the outer sphere's bounding box.

    S sums voxels whose centers fall inside the inner radius, B_raw those
    between inner and outer.  Membership and the raster accumulation order
    match a whole-image scan exactly.
    """
    ix, iy, iz = (int(c) for c in center)
    vs = np.array(image.voxel_size)
    r_in = spec.inner_diameter / 2.0
    r_out = spec.outer_diameter / 2.0
    rad_vox = r_out / vs
    lo, hi, clipped = _box_ranges((ix, iy, iz), rad_vox, image.dims)
    if any(h <= l for l, h in zip(lo, hi)):
        return 0.0, 0.0, 0, 0, True

    xs = (np.arange(lo[0], hi[0]) - ix) * vs[0]
    ys = (np.arange(lo[1], hi[1]) - iy) * vs[1]
    zs = (np.arange(lo[2], hi[2]) - iz) * vs[2]
    # data is x-fastest: reshape to (z, y, x) and slice accordingly
    vol = image.data.reshape(image.dims[2], image.dims[1], image.dims[0])
    box = vol[lo[2] : hi[2], lo[1] : hi[1], lo[0] : hi[0]]
    dist2 = (
        zs[:, None, None] ** 2 + ys[None, :, None] ** 2 + xs[None, None, :] ** 2
    )
    in_mask = dist2 < r_in * r_in
    shell_mask = (dist2 < r_out * r_out) & ~in_mask
    s = float(np.sum(box[in_mask]))
    b_raw = float(np.sum(box[shell_mask]))
    return s, b_raw, int(in_mask.sum()), int(shell_mask.sum()), clipped


def excess_at(image: Image3D, center, spec: SphereSpec):
    """(E, dE, valid) at one voxel center."""
    s, b_raw, n_in, n_shell, clipped = sphere_sums(image, center, spec)
    if clipped or n_shell == 0 or n_in == 0:
        return 0.0, 0.0, False
    b = b_raw * (n_in / n_shell)
    if b <= 0.0 or s <= 0.0:
        return 0.0, 0.0, False
    e = (s - b) / b
    de = (s / b) * np.sqrt(1.0 / s + 1.0 / b)
    return float(e), float(de), True


def excess_map(image: Image3D, spec: SphereSpec, backend: Backend) -> ExcessMap:
    """excess_at evaluated at every voxel, parallelized over voxel chunks.

    Interior voxels (outer sphere fully inside the image) share one
    relative-offset stencil, gathered in raster order so each per-voxel sum
    is bitwise the same as a direct excess_at call.
    """
    nx, ny, nz = image.dims
    n = image.n_voxels
    E = np.zeros(n)
    dE = np.zeros(n)
    valid = np.zeros(n, dtype=bool)

    vs = np.array(image.voxel_size)
    r_in = spec.inner_diameter / 2.0
    r_out = spec.outer_diameter / 2.0
    rad_vox = r_out / vs
    margin = [int(np.floor(r)) for r in rad_vox]

    # relative stencil in raster (z, y, x ascending) order
    oz, oy, ox = np.meshgrid(
        np.arange(-margin[2], margin[2] + 1),
        np.arange(-margin[1], margin[1] + 1),
        np.arange(-margin[0], margin[0] + 1),
        indexing="ij",
    )
    dist2 = (oz * vs[2]) ** 2 + (oy * vs[1]) ** 2 + (ox * vs[0]) ** 2
    in_sel = (dist2 < r_in * r_in).ravel()
    shell_sel = ((dist2 < r_out * r_out) & ~(dist2 < r_in * r_in)).ravel()
    flat_off = (ox + nx * (oy + ny * oz)).ravel()
    off_in = flat_off[in_sel]
    off_shell = flat_off[shell_sel]
    n_in = len(off_in)
    n_shell = len(off_shell)

    # interior voxels: bounding box never clipped
    interior = np.zeros((nz, ny, nx), dtype=bool)
    if (
        nx > 2 * margin[0] and ny > 2 * margin[1] and nz > 2 * margin[2]
        and n_in > 0 and n_shell > 0
    ):
        interior[
            margin[2] : nz - margin[2],
            margin[1] : ny - margin[1],
            margin[0] : nx - margin[0],
        ] = True
    interior_flat = np.flatnonzero(interior.ravel())

    data = image.data

    def chunk(lo, hi):
        base = interior_flat[lo:hi]
        vals_in = data[base[:, None] + off_in[None, :]]
        vals_shell = data[base[:, None] + off_shell[None, :]]
        s = vals_in.sum(axis=1)
        b_raw = vals_shell.sum(axis=1)
        b = b_raw * (n_in / n_shell)
        ok = (b > 0.0) & (s > 0.0)
        b_safe = np.where(ok, b, 1.0)
        s_safe = np.where(ok, s, 1.0)
        e = np.where(ok, (s - b) / b_safe, 0.0)
        de = np.where(ok, (s_safe / b_safe) * np.sqrt(1.0 / s_safe + 1.0 / b_safe), 0.0)
        return base, e, de, ok

    for base, e, de, ok in backend.run_chunked(chunk, len(interior_flat), chunk=1 << 12):
        E[base] = e
        dE[base] = de
        valid[base] = ok
    return ExcessMap(E=E, dE=dE, valid=valid, dims=image.dims)


def find_features(excess: ExcessMap, threshold: float) -> List[tuple]:
    """Valid voxels with significance >= threshold that are strict local
    maxima of E/dE over the 26-neighborhood, sorted by falling significance.

    Returns tuples ((ix, iy, iz), E, significance).
    """
    nx, ny, nz = excess.dims
    sig = np.full(excess.E.shape, -np.inf)
    ok = excess.valid & (excess.dE > 0)
    sig[ok] = excess.E[ok] / excess.dE[ok]
    vol = sig.reshape(nz, ny, nx)

    padded = np.pad(vol, 1, constant_values=-np.inf)
    neighbor_max = np.full_like(vol, -np.inf)
    for dz in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dz == dy == dx == 0:
                    continue
                shifted = padded[
                    1 + dz : 1 + dz + nz, 1 + dy : 1 + dy + ny, 1 + dx : 1 + dx + nx
                ]
                neighbor_max = np.maximum(neighbor_max, shifted)
    is_peak = (vol > neighbor_max) & np.isfinite(vol) & (vol >= threshold)

    zz, yy, xx = np.nonzero(is_peak)
    feats = []
    for z, y, x in zip(zz, yy, xx):
        flat = x + nx * (y + ny * z)
        feats.append(((int(x), int(y), int(z)), float(excess.E[flat]), float(vol[z, y, x])))
    feats.sort(key=lambda f: -f[2])
    return feats
