"""File formats: LMPT listmode, IMG3 images, muSR data and fit-input files.

Binary formats are little-endian with a 4-byte magic and a u32 version.

LMPT: "LMPT", version=1, u32 rings, u32 detectors_per_ring, f32 pitch_mm,
f32 ring_radius_mm, u64 event count, events as (u32 det_a, u32 det_b).

IMG3: "IMG3", version=1, u32 nx, ny, nz, f32 voxel size per axis, f32
origin per axis, then nx*ny*nz f32 values x-fastest.

The muSR data file and the fit-input file are sectioned text formats; see
load_musr_data / load_fit_config.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .musr import MusrDataset, MusrError, ParameterSet
from .pet.geometry import Image3D, ScannerGeometry
from .theory import TheoryBinding, TheoryExpr, parse as parse_theory


class FormatError(ValueError):
    pass


# -- LMPT -----------------------------------------------------------------

_LMPT_MAGIC = b"LMPT"
_IMG3_MAGIC = b"IMG3"


def store_lmpt(path, events: np.ndarray, geometry: ScannerGeometry) -> None:
    ev = np.asarray(events, dtype=np.uint32).reshape(-1, 2)
    with open(path, "wb") as fh:
        fh.write(_LMPT_MAGIC)
        fh.write(
            struct.pack(
                "<IIIffQ",
                1,
                geometry.rings,
                geometry.detectors_per_ring,
                geometry.pitch,
                geometry.ring_radius,
                len(ev),
            )
        )
        fh.write(np.ascontiguousarray(ev, dtype="<u4").tobytes())


def load_lmpt(path) -> Tuple[np.ndarray, ScannerGeometry]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _LMPT_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected LMPT")
        header = fh.read(struct.calcsize("<IIIffQ"))
        if len(header) != struct.calcsize("<IIIffQ"):
            raise FormatError(f"{path}: truncated LMPT header")
        version, rings, dpr, pitch, radius, count = struct.unpack("<IIIffQ", header)
        if version != 1:
            raise FormatError(f"{path}: unsupported LMPT version {version}")
        payload = fh.read(count * 8)
        if len(payload) != count * 8:
            raise FormatError(
                f"{path}: truncated LMPT payload, expected {count} events"
            )
        events = np.frombuffer(payload, dtype="<u4").reshape(count, 2).astype(np.int64)
    geometry = ScannerGeometry(
        rings=rings, detectors_per_ring=dpr, pitch=float(pitch), ring_radius=float(radius)
    )
    return events, geometry


# -- IMG3 -----------------------------------------------------------------

def store_img3(path, image: Image3D) -> None:
    with open(path, "wb") as fh:
        fh.write(_IMG3_MAGIC)
        fh.write(struct.pack("<IIII", 1, *image.dims))
        fh.write(struct.pack("<fff", *image.voxel_size))
        fh.write(struct.pack("<fff", *image.origin))
        fh.write(np.asarray(image.data, dtype="<f4").tobytes())


def load_img3(path) -> Image3D:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _IMG3_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected IMG3")
        header = fh.read(struct.calcsize("<IIIIffffff"))
        if len(header) != struct.calcsize("<IIIIffffff"):
            raise FormatError(f"{path}: truncated IMG3 header")
        version, nx, ny, nz, vx, vy, vz, ox, oy, oz = struct.unpack("<IIIIffffff", header)
        if version != 1:
            raise FormatError(f"{path}: unsupported IMG3 version {version}")
        n = nx * ny * nz
        payload = fh.read(n * 4)
        if len(payload) != n * 4:
            raise FormatError(f"{path}: truncated IMG3 payload, expected {n} voxels")
        data = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return Image3D(dims=(nx, ny, nz), voxel_size=(vx, vy, vz), origin=(ox, oy, oz), data=data)


# -- muSR data file -------------------------------------------------------
#
# Text format, one DETECTOR block per histogram:
#
#   DETECTOR 0
#   dt 0.001
#   t0 0
#   n0_slot 4
#   nbkg_slot 5
#   map 0 1 2 3 0
#   func 22.5
#   counts 120 118 119 ...
#
# counts may continue over multiple lines until the next DETECTOR or EOF.

def store_musr_data(path, datasets: List[MusrDataset]) -> None:
    lines = []
    for ds in datasets:
        lines.append(f"DETECTOR {ds.detector_index}")
        lines.append(f"dt {ds.dt!r}")
        lines.append(f"t0 {ds.t0_bin}")
        lines.append(f"n0_slot {ds.n0_slot}")
        lines.append(f"nbkg_slot {ds.nbkg_slot}")
        lines.append("map " + " ".join(str(m) for m in ds.binding.map))
        lines.append("func " + " ".join(repr(v) for v in ds.binding.function_values))
        counts = ds.counts.astype(np.int64)
        for lo in range(0, len(counts), 16):
            prefix = "counts " if lo == 0 else "  "
            lines.append(prefix + " ".join(str(c) for c in counts[lo : lo + 16]))
        lines.append("")
    with open(path, "w") as fh:
        fh.write("\n".join(lines))


def load_musr_data(path) -> List[MusrDataset]:
    datasets = []
    block = None

    def finish(block):
        missing = [k for k in ("dt", "t0", "n0_slot", "nbkg_slot", "map", "counts") if k not in block]
        if missing:
            raise FormatError(
                f"{path}: detector {block['index']} is missing {', '.join(missing)}"
            )
        counts = block["counts"]
        for bin_no, c in enumerate(counts):
            if c < 0:
                raise FormatError(
                    f"{path}: detector {block['index']} has a negative count at bin {bin_no}"
                )
        try:
            return MusrDataset(
                detector_index=block["index"],
                counts=np.asarray(counts, dtype=np.int64),
                dt=block["dt"],
                t0_bin=block["t0"],
                binding=TheoryBinding(map=block["map"], function_values=block.get("func", ())),
                n0_slot=block["n0_slot"],
                nbkg_slot=block["nbkg_slot"],
            )
        except MusrError as exc:
            raise FormatError(f"{path}: {exc}") from exc

    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            key = parts[0]
            try:
                if key == "DETECTOR":
                    if block is not None:
                        datasets.append(finish(block))
                    block = {"index": int(parts[1])}
                elif block is None:
                    raise FormatError(f"{path}:{lineno}: data before any DETECTOR header")
                elif key == "dt":
                    block["dt"] = float(parts[1])
                elif key == "t0":
                    block["t0"] = int(parts[1])
                elif key == "n0_slot":
                    block["n0_slot"] = int(parts[1])
                elif key == "nbkg_slot":
                    block["nbkg_slot"] = int(parts[1])
                elif key == "map":
                    block["map"] = tuple(int(v) for v in parts[1:])
                elif key == "func":
                    block["func"] = tuple(float(v) for v in parts[1:])
                elif key == "counts":
                    block["counts"] = [int(v) for v in parts[1:]]
                elif "counts" in block:
                    block["counts"].extend(int(v) for v in parts)
                else:
                    raise FormatError(f"{path}:{lineno}: unknown key {key!r}")
            except FormatError:
                raise
            except (ValueError, IndexError) as exc:
                raise FormatError(f"{path}:{lineno}: malformed line: {line!r}") from exc
    if block is not None:
        datasets.append(finish(block))
    if not datasets:
        raise FormatError(f"{path}: no detector blocks found")
    return datasets


# -- fit input file -------------------------------------------------------
#
# Sectioned key-value text:
#
#   [THEORY]
#   expr = p[m[0]] * sg(t, p[m[1]]) * tf(t, p[m[2]], f[m[0]])
#   [PARAMETERS]
#   # name  start  step  lo  hi  fixed
#   A0      0.25   0.01  -   -   free
#   N0      1000   1     0   -   fixed
#   [DATASETS]
#   file = data.musr
#   [RANGE]
#   start = 0.0
#   end = 9.0

@dataclass
class FitConfig:
    theory: TheoryExpr
    params: ParameterSet
    data_files: List[str]
    fit_range: Optional[Tuple[float, float]] = None


def load_fit_config(path) -> FitConfig:
    section = None
    expr_src = None
    rows = []
    files = []
    range_vals = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].upper()
                if section not in ("THEORY", "PARAMETERS", "DATASETS", "RANGE"):
                    raise FormatError(f"{path}:{lineno}: unknown section [{section}]")
                continue
            if section == "THEORY":
                if "=" not in line:
                    raise FormatError(f"{path}:{lineno}: expected 'expr = ...'")
                key, _, value = line.partition("=")
                if key.strip() != "expr":
                    raise FormatError(f"{path}:{lineno}: unknown theory key {key.strip()!r}")
                expr_src = value.strip()
            elif section == "PARAMETERS":
                parts = line.split()
                if len(parts) != 6:
                    raise FormatError(
                        f"{path}:{lineno}: parameter rows need 6 columns "
                        "(name start step lo hi fixed/free)"
                    )
                name, start, step, lo, hi, flag = parts
                if flag not in ("fixed", "free"):
                    raise FormatError(f"{path}:{lineno}: last column must be fixed or free")
                try:
                    rows.append(
                        (
                            name,
                            float(start),
                            float(step),
                            None if lo == "-" else float(lo),
                            None if hi == "-" else float(hi),
                            flag == "fixed",
                        )
                    )
                except ValueError as exc:
                    raise FormatError(f"{path}:{lineno}: malformed number: {line!r}") from exc
            elif section == "DATASETS":
                key, _, value = line.partition("=")
                if key.strip() != "file":
                    raise FormatError(f"{path}:{lineno}: unknown datasets key {key.strip()!r}")
                files.append(value.strip())
            elif section == "RANGE":
                key, _, value = line.partition("=")
                key = key.strip()
                if key not in ("start", "end"):
                    raise FormatError(f"{path}:{lineno}: unknown range key {key!r}")
                try:
                    range_vals[key] = float(value)
                except ValueError as exc:
                    raise FormatError(f"{path}:{lineno}: malformed number {value!r}") from exc
            else:
                raise FormatError(f"{path}:{lineno}: content before any section header")
    if expr_src is None:
        raise FormatError(f"{path}: missing [THEORY] expr")
    if not rows:
        raise FormatError(f"{path}: no parameters defined")
    if not files:
        raise FormatError(f"{path}: no dataset files listed")
    params = ParameterSet(
        values=np.array([r[1] for r in rows]),
        names=[r[0] for r in rows],
        step_sizes=np.array([r[2] for r in rows]),
        bounds=[
            None if r[3] is None and r[4] is None
            else (r[3] if r[3] is not None else -np.inf, r[4] if r[4] is not None else np.inf)
            for r in rows
        ],
        fixed=np.array([r[5] for r in rows]),
    )
    fit_range = None
    if range_vals:
        fit_range = (range_vals.get("start", 0.0), range_vals.get("end", np.inf))
    return FitConfig(
        theory=parse_theory(expr_src),
        params=params,
        data_files=files,
        fit_range=fit_range,
    )
