"""LOR classification and slice-walking forward/backward projection.

Each line of response is labeled by its predominant transverse direction
(0 = skip, 1 = x-dominant, 2 = y-dominant) and the projectors walk the
planes perpendicular to that axis through the voxel centers.  At every
plane the line's intersection point lands in a voxel; that voxel and its
three neighbors in the positive transverse directions receive the
system-matrix contribution

    a = max(0, m_d - dist(intersection, voxel center))

with the distance taken in the plane.  m_d is the matrix distance factor;
the max(0, .) clamp drops voxels farther than m_d.

Forward projection computes ybar per distinct detector pair once and fans
the value out to duplicate events; backward projection accumulates
a / ybar into the correction image through the backend scatter_add
primitive in a fixed (group, plane, neighbor, event) order, which keeps
every projection bit-identical across backends.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from ..backend import Backend
from .geometry import GeometryError, Image3D, ScannerGeometry

LOR_SKIP = 0
LOR_X = 1
LOR_Y = 2

# (u, v, w): walk axis and the two in-plane axes for each label.  Neighbor
# offsets are applied along v and w (the positive y/z directions for
# x-dominant lines, x/z for y-dominant).
_AXES = {LOR_X: (0, 1, 2), LOR_Y: (1, 0, 2)}
_NEIGHBOR_OFFSETS = ((0, 0), (1, 0), (0, 1), (1, 1))


@dataclass
class ReconConfig:
    matrix_distance_factor: Optional[float] = None  # mm; default: transaxial voxel size
    iterations: int = 15
    event_halving: bool = False
    noise_term: float = 0.0          # n_i, one constant for every LOR
    sensitivity_mode: str = "events"  # "uniform" | "events" | "full"

    def __post_init__(self):
        if self.matrix_distance_factor is not None and self.matrix_distance_factor <= 0:
            raise GeometryError("matrix distance factor must be positive")
        if self.iterations < 1:
            raise GeometryError("need at least one iteration")
        if self.sensitivity_mode not in ("uniform", "events", "full"):
            raise GeometryError(f"unknown sensitivity mode {self.sensitivity_mode!r}")

    def m_d(self, image: Image3D) -> float:
        if self.matrix_distance_factor is not None:
            return self.matrix_distance_factor
        return image.voxel_size[0]


def _as_events(events) -> np.ndarray:
    ev = np.asarray(events, dtype=np.int64)
    if ev.size == 0:
        return ev.reshape(0, 2)
    if ev.ndim != 2 or ev.shape[1] != 2:
        raise GeometryError("events must have shape (n, 2)")
    return ev


# -- classification -------------------------------------------------------

def classify_lors(events, geometry: ScannerGeometry, image: Image3D) -> np.ndarray:
    """Vectorized label per event: LOR_SKIP, LOR_X or LOR_Y.

    Skip when the segment's axis-aligned bounding box misses the image box
    or the line has no transverse extent; ties |dx| == |dy| go to LOR_X.
    """
    ev = _as_events(events)
    if len(ev) == 0:
        return np.zeros(0, dtype=np.uint32)
    pa = geometry.positions(ev[:, 0])
    pb = geometry.positions(ev[:, 1])
    lo, hi = image.bounds()
    seg_lo = np.minimum(pa, pb)
    seg_hi = np.maximum(pa, pb)
    overlap = np.all((seg_lo <= hi) & (seg_hi >= lo), axis=1)
    delta = pb - pa
    adx = np.abs(delta[:, 0])
    ady = np.abs(delta[:, 1])
    transverse = np.maximum(adx, ady) > 0
    labels = np.where(adx >= ady, LOR_X, LOR_Y).astype(np.uint32)
    labels[~(overlap & transverse)] = LOR_SKIP
    return labels


def classify_lor(event, geometry: ScannerGeometry, image: Image3D) -> int:
    return int(classify_lors(np.asarray(event).reshape(1, 2), geometry, image)[0])


def sort_events(events, labels, backend: Backend):
    """Stable grouping Skip | X | Y via the sort_by_key primitive.

    Returns (sorted events, offsets) with offsets[k]..offsets[k+1] the
    range of label k.
    """
    ev = _as_events(events)
    labels = np.asarray(labels, dtype=np.uint32)
    if len(labels) != len(ev):
        raise GeometryError("labels and events must have equal lengths")
    keys, vals = backend.sort_by_key(labels, ev)
    offsets = np.searchsorted(keys, [0, 1, 2, 3])
    return vals, offsets


# -- system matrix --------------------------------------------------------

def _plane_intersections(pa, delta, axes, s, image):
    """In-plane coordinates and base voxel indices for plane s along axis u."""
    u, v, w = axes
    plane_coord = image.origin[u] + s * image.voxel_size[u]
    tpar = (plane_coord - pa[:, u]) / delta[:, u]
    pv = pa[:, v] + tpar * delta[:, v]
    pw = pa[:, w] + tpar * delta[:, w]
    iv = np.floor((pv - image.origin[v]) / image.voxel_size[v] + 0.5).astype(np.int64)
    iw = np.floor((pw - image.origin[w]) / image.voxel_size[w] + 0.5).astype(np.int64)
    return pv, pw, iv, iw


def _neighbor_contrib(pv, pw, iv, iw, ov, ow, axes, s, image, m_d):
    """Flat voxel ids and clamped weights for one neighbor offset; weight 0
    where the voxel falls outside the image."""
    u, v, w = axes
    jv = iv + ov
    jw = iw + ow
    cv = image.origin[v] + jv * image.voxel_size[v]
    cw = image.origin[w] + jw * image.voxel_size[w]
    dist = np.sqrt((pv - cv) ** 2 + (pw - cw) ** 2)
    inside = (jv >= 0) & (jv < image.dims[v]) & (jw >= 0) & (jw < image.dims[w])
    a = np.where(inside, np.maximum(0.0, m_d - dist), 0.0)
    coords = [None, None, None]
    coords[u] = np.full_like(jv, s)
    coords[v] = jv
    coords[w] = jw
    flat = np.where(
        inside,
        coords[0] + image.dims[0] * (coords[1] + image.dims[1] * coords[2]),
        0,
    )
    return flat, a


def matrix_elements_at_plane(
    event, plane: int, geometry: ScannerGeometry, image: Image3D, m_d: float
) -> list:
    """Up to four (flat voxel id, a) pairs for one LOR at one plane.

    The plane index runs along the LOR's predominant axis; an out-of-image
    plane or all-clamped contributions yield an empty list.
    """
    ev = np.asarray(event).reshape(1, 2)
    label = classify_lor(ev[0], geometry, image)
    if label == LOR_SKIP:
        raise GeometryError("matrix elements undefined for a skipped LOR")
    axes = _AXES[label]
    if not 0 <= plane < image.dims[axes[0]]:
        return []
    pa = geometry.positions(ev[:, 0])
    delta = geometry.positions(ev[:, 1]) - pa
    pv, pw, iv, iw = _plane_intersections(pa, delta, axes, plane, image)
    out = []
    for ov, ow in _NEIGHBOR_OFFSETS:
        flat, a = _neighbor_contrib(pv, pw, iv, iw, ov, ow, axes, plane, image, m_d)
        if a[0] > 0.0:
            out.append((int(flat[0]), float(a[0])))
    return out


# -- distinct-LOR bookkeeping --------------------------------------------

def _distinct_lors(events, geometry: ScannerGeometry):
    """Canonical distinct detector pairs plus inverse map and multiplicity.

    A pair and its reverse name the same line, so the key orders the two
    detector ids.  np.unique sorts the keys, giving a stable canonical
    order for the per-LOR arrays.
    """
    ev = _as_events(events)
    lo = np.minimum(ev[:, 0], ev[:, 1])
    hi = np.maximum(ev[:, 0], ev[:, 1])
    if np.any(lo == hi):
        raise GeometryError("event with identical detectors")
    keys = lo * np.int64(geometry.n_detectors) + hi
    uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    pairs = np.stack([uniq // geometry.n_detectors, uniq % geometry.n_detectors], axis=1)
    return pairs, inverse, counts


# -- projections ----------------------------------------------------------

def _grouped(pairs, geometry, image):
    """Label distinct LORs and return per-label index arrays."""
    labels = classify_lors(pairs, geometry, image)
    return {label: np.flatnonzero(labels == label) for label in (LOR_X, LOR_Y)}


def _forward_group(pairs, idx, label, geometry, image, m_d, backend):
    """ybar contribution of one direction group, chunked over events."""
    axes = _AXES[label]
    pa_all = geometry.positions(pairs[idx, 0])
    pb_all = geometry.positions(pairs[idx, 1])
    f = image.data

    def chunk(lo, hi):
        pa = pa_all[lo:hi]
        delta = pb_all[lo:hi] - pa
        acc = np.zeros(hi - lo)
        for s in range(image.dims[axes[0]]):
            pv, pw, iv, iw = _plane_intersections(pa, delta, axes, s, image)
            for ov, ow in _NEIGHBOR_OFFSETS:
                flat, a = _neighbor_contrib(pv, pw, iv, iw, ov, ow, axes, s, image, m_d)
                acc += a * f[flat]
        return acc

    parts = backend.run_chunked(chunk, len(idx))
    return np.concatenate(parts) if parts else np.zeros(0)


def forward_project(
    events, image: Image3D, geometry: ScannerGeometry, config: ReconConfig, backend: Backend
) -> np.ndarray:
    """Expected counts ybar per event (computed once per distinct LOR)."""
    ev = _as_events(events)
    if len(ev) == 0:
        return np.zeros(0)
    pairs, inverse, _ = _distinct_lors(ev, geometry)
    m_d = config.m_d(image)
    ybar = np.full(len(pairs), config.noise_term, dtype=np.float64)
    for label, idx in _grouped(pairs, geometry, image).items():
        if len(idx):
            ybar[idx] += _forward_group(pairs, idx, label, geometry, image, m_d, backend)
    return ybar[inverse]


def _backproject_weights(pairs, weights, geometry, image_spec: Image3D, m_d, backend):
    """Accumulate sum_planes a * weight per LOR into a fresh image.

    Contributions are scattered in a fixed (label, plane, neighbor, LOR)
    order so the per-voxel accumulation sequence never depends on the
    backend.
    """
    out = image_spec.like()
    for label, idx in _grouped(pairs, geometry, image_spec).items():
        if not len(idx):
            continue
        axes = _AXES[label]
        pa = geometry.positions(pairs[idx, 0])
        delta = geometry.positions(pairs[idx, 1]) - pa
        w = weights[idx]
        for s in range(image_spec.dims[axes[0]]):
            pv, pw, iv, iw = _plane_intersections(pa, delta, axes, s, image_spec)
            for ov, ow in _NEIGHBOR_OFFSETS:
                flat, a = _neighbor_contrib(pv, pw, iv, iw, ov, ow, axes, s, image_spec, m_d)
                contrib = a * w
                nz = contrib != 0.0
                if nz.any():
                    backend.scatter_add(out.data, flat[nz], contrib[nz])
    return out


def backward_project(
    events, ybar, image_spec: Image3D, geometry: ScannerGeometry,
    config: ReconConfig, backend: Backend,
) -> Image3D:
    """Correction image: sum over events of a / ybar per touched voxel.

    Events whose ybar is zero are skipped (they carry no information with a
    truncated system matrix).
    """
    ev = _as_events(events)
    out = image_spec.like()
    if len(ev) == 0:
        return out
    ybar = np.asarray(ybar, dtype=np.float64)
    if len(ybar) != len(ev):
        raise GeometryError("ybar must align with events")
    pairs, inverse, counts = _distinct_lors(ev, geometry)
    yb_u = np.zeros(len(pairs))
    yb_u[inverse] = ybar  # duplicates carry identical ybar by construction
    with np.errstate(divide="ignore"):
        weights = np.where(yb_u > 0, counts / np.where(yb_u > 0, yb_u, 1.0), 0.0)
    return _backproject_weights(pairs, weights, geometry, image_spec, config.m_d(image_spec), backend)


def _all_pairs(geometry: ScannerGeometry) -> np.ndarray:
    n = geometry.n_detectors
    a, b = np.triu_indices(n, k=1)
    return np.stack([a, b], axis=1).astype(np.int64)


def compute_sensitivity(
    events, image_spec: Image3D, geometry: ScannerGeometry,
    config: ReconConfig, backend: Backend,
) -> Image3D:
    """Per-voxel MLEM denominator, per the configured mode.

    uniform: all ones.  events: unit-weight backprojection over the
    distinct event LORs.  full: unit-weight backprojection over every
    detector pair (exhaustive; small scanners only).
    """
    if config.sensitivity_mode == "uniform":
        return image_spec.like(fill=1.0)
    if config.sensitivity_mode == "events":
        ev = _as_events(events)
        if len(ev) == 0:
            return image_spec.like()
        pairs, _, _ = _distinct_lors(ev, geometry)
    else:
        pairs = _all_pairs(geometry)
    weights = np.ones(len(pairs))
    return _backproject_weights(
        pairs, weights, geometry, image_spec, config.m_d(image_spec), backend
    )
