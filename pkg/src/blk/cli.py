"""Command-line front end.

Subcommands: fit, simulate-musr, simulate-pet, recon, analyze.  Every
subcommand is a pure function of its input files, flags and --seed, so
repeated invocations produce byte-identical outputs; --threads only
changes wall time.  Exit codes: 0 success, 1 usage error, 2 data or
domain error.
"""

from __future__ import annotations

import argparse
import sys
from typing import List, Optional

import numpy as np

from . import analysis, io, musr
from .backend import Backend, BackendError, resolve_worker_count
from .optimize import MinimizeConfig, OptimizeError
from .pet import (
    Image3D,
    PhantomSphere,
    ReconConfig,
    ScannerGeometry,
    derenzo_phantom,
    reconstruct,
    simulate_listmode,
)
from .pet.geometry import GeometryError
from .theory import TheoryError


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _backend(args) -> Backend:
    return Backend(worker_count=resolve_worker_count(args.threads))


def build_parser() -> _Parser:
    parser = _Parser(prog="blk", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p):
        p.add_argument("--threads", type=int, default=None, help="worker count (default: BLK_THREADS or 1)")
        p.add_argument("--seed", type=int, default=0, help="seed for all randomness")

    p_fit = sub.add_parser("fit", help="muSR parameter fit")
    common(p_fit)
    p_fit.add_argument("--input", required=True, help="fit-input file")
    p_fit.add_argument("--objective", choices=("chi2", "mlh"), default="chi2")
    p_fit.add_argument("--out", required=True, help="fit report output path")

    p_sm = sub.add_parser("simulate-musr", help="generate synthetic muSR histograms")
    common(p_sm)
    p_sm.add_argument("--out", required=True, help="muSR data file to write")
    p_sm.add_argument("--config-out", default=None, help="also write a matching fit-input file")
    p_sm.add_argument("--detectors", type=int, default=16)
    p_sm.add_argument("--bins", type=int, default=50000)
    p_sm.add_argument("--dt", type=float, default=0.0001953125, help="bin width, us")
    p_sm.add_argument("--a0", type=float, default=0.25)
    p_sm.add_argument("--sigma", type=float, default=0.2, help="depolarization rate, 1/us")
    p_sm.add_argument("--field", type=float, default=0.05, help="magnetic field, T")
    p_sm.add_argument("--phi-offset", type=float, default=0.0, help="common phase offset, degrees")
    p_sm.add_argument("--n0", type=float, default=1000.0)
    p_sm.add_argument("--nbkg", type=float, default=10.0)

    p_sp = sub.add_parser("simulate-pet", help="simulate list-mode coincidence events")
    common(p_sp)
    p_sp.add_argument("--out", required=True, help="LMPT file to write")
    p_sp.add_argument("--events-count", type=int, required=True)
    p_sp.add_argument("--full-preset", action="store_true", help="91x180 scanner at 2.2 mm pitch")
    p_sp.add_argument("--rings", type=int, default=91)
    p_sp.add_argument("--dets-per-ring", type=int, default=180)
    p_sp.add_argument("--pitch", type=float, default=2.2)
    p_sp.add_argument(
        "--point-source", default=None, metavar="X,Y,Z",
        help="replace the Derenzo phantom with a point source at X,Y,Z mm",
    )

    p_rc = sub.add_parser("recon", help="list-mode MLEM reconstruction")
    common(p_rc)
    p_rc.add_argument("--events", required=True, help="LMPT input file")
    p_rc.add_argument("--out", required=True, help="IMG3 output file")
    p_rc.add_argument("--iters", type=int, default=15)
    p_rc.add_argument("--halving", choices=("on", "off"), default="off")
    p_rc.add_argument("--sensitivity", choices=("uniform", "events", "full"), default="events")
    p_rc.add_argument("--md", type=float, default=None, help="matrix distance factor, mm")
    p_rc.add_argument("--full-preset", action="store_true",
                      help="90x90x50 @ 0.7 mm image, 15 iterations, halving on")
    p_rc.add_argument("--dims", default="90,90,50", metavar="NX,NY,NZ")
    p_rc.add_argument("--voxel-size", type=float, default=0.7)

    p_an = sub.add_parser("analyze", help="sphere excess / feature finding")
    common(p_an)
    p_an.add_argument("--image", required=True, help="IMG3 input file")
    p_an.add_argument("--inner", type=float, default=2.0, help="inner sphere diameter, mm")
    p_an.add_argument("--outer", type=float, default=4.0, help="outer sphere diameter, mm")
    p_an.add_argument("--sigma", type=float, default=3.0, help="significance threshold")
    p_an.add_argument("--out", required=True, help="feature list output file")
    p_an.add_argument("--maps-prefix", default=None,
                      help="write <prefix>_E.img3, <prefix>_dE.img3, <prefix>_valid.img3")
    p_an.add_argument("--duration", type=float, default=1.0,
                      help="multiply the image by this factor before analysis "
                           "(rate images to counts)")
    return parser


# -- subcommand bodies ----------------------------------------------------

def _eq6_setup(args):
    """Theory, truth parameters and per-detector bindings for the canonical
    Gaussian-damped cosine model."""
    from .theory import TheoryBinding, parse as parse_theory

    # nu[MHz] = (gamma_mu / 2 pi)[MHz/T] * B[T]
    gamma_over_2pi = musr.GAMMA_MU / (2.0 * np.pi)
    theory = parse_theory(
        f"p[m[0]] * sg(t, p[m[1]]) * tf(t, p[m[2]] + f[m[4]], {gamma_over_2pi!r} * p[m[3]])"
    )
    names = ["A0", "sigma", "phi_offset", "B", "N0", "Nbkg"]
    values = np.array([args.a0, args.sigma, args.phi_offset, args.field, args.n0, args.nbkg])
    steps = np.array([0.01, 0.01, 1.0, 0.001, 1.0, 0.5])
    fixed = np.array([False, False, False, False, True, True])
    params = musr.ParameterSet(values=values, names=names, step_sizes=steps, fixed=fixed)
    phases = musr.default_phases(args.detectors)
    bindings = [
        TheoryBinding(map=(0, 1, 2, 3, 0), function_values=(float(ph),)) for ph in phases
    ]
    return theory, params, bindings


def cmd_simulate_musr(args) -> int:
    theory, params, bindings = _eq6_setup(args)
    datasets = musr.generate_synthetic(
        truth=params,
        expr=theory,
        bindings=bindings,
        n0_slots=[params.slot("N0")] * args.detectors,
        nbkg_slots=[params.slot("Nbkg")] * args.detectors,
        nbins=args.bins,
        dt=args.dt,
        seed=args.seed,
    )
    io.store_musr_data(args.out, datasets)
    if args.config_out:
        lines = [
            "[THEORY]",
            f"expr = {theory.source}",
            "[PARAMETERS]",
            "# name start step lo hi fixed",
        ]
        for k, name in enumerate(params.names):
            flag = "fixed" if params.fixed[k] else "free"
            lines.append(
                f"{name} {float(params.values[k])!r} {float(params.step_sizes[k])!r} - - {flag}"
            )
        lines += ["[DATASETS]", f"file = {args.out}", ""]
        with open(args.config_out, "w") as fh:
            fh.write("\n".join(lines))
    return 0


def cmd_fit(args) -> int:
    backend = _backend(args)
    config = io.load_fit_config(args.input)
    datasets = []
    for f in config.data_files:
        datasets.extend(io.load_musr_data(f))
    if config.fit_range is not None:
        for ds in datasets:
            ds.fit_range = config.fit_range
    result = musr.minimize(args.objective, datasets, config.theory, config.params, backend)
    ndf = musr.degrees_of_freedom(datasets, config.params)
    lines = [
        f"objective {args.objective}",
        f"value {float(result.objective_value)!r}",
        f"ndf {ndf}",
        f"value_per_ndf {float(result.objective_value / ndf)!r}" if ndf > 0 else "value_per_ndf nan",
        f"iterations {result.iterations}",
        f"evaluations {result.objective_evaluations}",
        f"converged {result.converged}",
        "parameters",
    ]
    best = result.best_parameters
    for k, name in enumerate(best.names):
        flag = "fixed" if best.fixed[k] else "free"
        lines.append(f"  {name} {float(best.values[k])!r} {flag}")
    with open(args.out, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return 0


def cmd_simulate_pet(args) -> int:
    if args.full_preset:
        geometry = ScannerGeometry.full_preset()
    else:
        geometry = ScannerGeometry(
            rings=args.rings, detectors_per_ring=args.dets_per_ring, pitch=args.pitch
        )
    if args.point_source is not None:
        try:
            x, y, z = (float(v) for v in args.point_source.split(","))
        except ValueError:
            raise _UsageError(f"--point-source expects X,Y,Z, got {args.point_source!r}")
        phantom = [PhantomSphere(center=(x, y, z), diameter=0.0, activity=1.0)]
    else:
        phantom = derenzo_phantom()
    events = simulate_listmode(
        phantom, geometry, seed=args.seed, detected_target=args.events_count
    )
    io.store_lmpt(args.out, events, geometry)
    return 0


def cmd_recon(args) -> int:
    backend = _backend(args)
    events, geometry = io.load_lmpt(args.events)
    if args.full_preset:
        image = Image3D.full_preset(fill=1.0)
        config = ReconConfig(
            matrix_distance_factor=args.md,
            iterations=args.iters,
            event_halving=True,
            sensitivity_mode=args.sensitivity,
        )
    else:
        try:
            dims = tuple(int(v) for v in args.dims.split(","))
            if len(dims) != 3:
                raise ValueError
        except ValueError:
            raise _UsageError(f"--dims expects NX,NY,NZ, got {args.dims!r}")
        image = Image3D.centered(dims, (args.voxel_size,) * 3, fill=1.0)
        config = ReconConfig(
            matrix_distance_factor=args.md,
            iterations=args.iters,
            event_halving=args.halving == "on",
            sensitivity_mode=args.sensitivity,
        )
    result = reconstruct(events, image, geometry, config, backend)
    io.store_img3(args.out, result.image)
    return 0


def cmd_analyze(args) -> int:
    backend = _backend(args)
    image = io.load_img3(args.image)
    if args.duration != 1.0:
        image.data *= args.duration
    spec = analysis.SphereSpec(inner_diameter=args.inner, outer_diameter=args.outer)
    emap = analysis.excess_map(image, spec, backend)
    features = analysis.find_features(emap, args.sigma)
    with open(args.out, "w") as fh:
        for (ix, iy, iz), e, sig in features:
            fh.write(f"{ix} {iy} {iz} {e!r} {sig!r}\n")
    if args.maps_prefix:
        for suffix, data in (
            ("E", emap.E),
            ("dE", emap.dE),
            ("valid", emap.valid.astype(np.float64)),
        ):
            out = Image3D(
                dims=image.dims, voxel_size=image.voxel_size, origin=image.origin, data=data
            )
            io.store_img3(f"{args.maps_prefix}_{suffix}.img3", out)
    return 0


_COMMANDS = {
    "fit": cmd_fit,
    "simulate-musr": cmd_simulate_musr,
    "simulate-pet": cmd_simulate_pet,
    "recon": cmd_recon,
    "analyze": cmd_analyze,
}


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"blk: usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.subcommand](args)
    except _UsageError as exc:
        print(f"blk: usage error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"blk: missing file: {exc.filename}", file=sys.stderr)
        return 2
    except (
        io.FormatError,
        musr.MusrError,
        TheoryError,
        GeometryError,
        analysis.AnalysisError,
        BackendError,
        OptimizeError,
    ) as exc:
        print(f"blk: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
