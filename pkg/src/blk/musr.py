"""muSR fitting engine.

Histogram model, chi-square and Poisson log-likelihood objectives, a
seeded synthetic-data generator, and a derivative-free fit driver.

The per-detector histogram follows

    N(t) = N0 * exp(-t / tau_mu) * (1 + A(t)) + Nbkg

with the asymmetry A(t) supplied as a theory expression evaluated through a
per-dataset binding.  Objectives sum per-bin terms through the backend
map_reduce primitive, so chi2/mlh values are bit-identical on every
backend.

Conventions: time in microseconds, field in tesla, frequencies in MHz,
phases in degrees.  Bin errors are floored at 1 (max(1, sqrt(d))) so empty
bins do not blow up chi2; the log-likelihood uses the d*log(d/N) := 0
convention at d = 0 and is minimized (the printed form is twice the
negative log-likelihood ratio, non-negative and zero at a perfect fit).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .backend import Backend
from .optimize import MinimizeConfig, nelder_mead
from .theory import TheoryBinding, TheoryExpr

__all__ = [
    "PhysicsConstants",
    "MusrDataset",
    "ParameterSet",
    "FitResult",
    "MusrError",
    "model_expected",
    "model_bin",
    "chi2",
    "mlh",
    "minimize",
    "generate_synthetic",
]

# Standard physical constants (not fit to anything; overridable for tests).
TAU_MU_US = 2.197019                     # muon lifetime, microseconds
GAMMA_MU = 2.0 * np.pi * 135.538809     # gyromagnetic ratio, rad / (us T)


@dataclass(frozen=True)
class PhysicsConstants:
    tau_mu: float = TAU_MU_US
    gamma_mu: float = GAMMA_MU

    def __post_init__(self):
        if self.tau_mu <= 0:
            raise ValueError("tau_mu must be positive")


class MusrError(ValueError):
    pass


@dataclass
class MusrDataset:
    """One detector's positron count histogram plus its theory binding."""

    detector_index: int
    counts: np.ndarray            # non-negative integers
    dt: float                     # bin width, us
    t0_bin: int                   # bin index of t = 0
    binding: TheoryBinding
    n0_slot: int                  # index of N0 in the global parameter vector
    nbkg_slot: int                # index of Nbkg in the global parameter vector
    fit_range: Optional[tuple] = None   # (t_start, t_end); default [0, last bin]

    def __post_init__(self):
        self.counts = np.asarray(self.counts)
        if len(self.counts) < 1:
            raise MusrError(f"detector {self.detector_index}: empty histogram")
        if self.dt <= 0:
            raise MusrError(f"detector {self.detector_index}: dt must be positive")
        if np.any(self.counts < 0):
            bad = int(np.argmax(self.counts < 0))
            raise MusrError(
                f"detector {self.detector_index}: negative count at bin {bad}"
            )
        self.counts = self.counts.astype(np.float64)

    def times(self) -> np.ndarray:
        return (np.arange(len(self.counts)) - self.t0_bin) * self.dt

    def errors(self) -> np.ndarray:
        return np.maximum(1.0, np.sqrt(self.counts))

    def range_mask(self) -> np.ndarray:
        t = self.times()
        lo, hi = self.fit_range if self.fit_range is not None else (0.0, np.inf)
        return (t >= max(lo, 0.0)) & (t <= hi)


@dataclass
class ParameterSet:
    """The full parameter vector P with names, steps, bounds and fix flags."""

    values: np.ndarray
    names: list
    step_sizes: np.ndarray
    bounds: Optional[list] = None   # per slot: None or (lo, hi); None entry = unbounded
    fixed: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.step_sizes = np.asarray(self.step_sizes, dtype=np.float64)
        n = len(self.values)
        if len(self.names) != n or len(self.step_sizes) != n:
            raise MusrError("values, names and step_sizes must have equal lengths")
        if self.bounds is None:
            self.bounds = [None] * n
        if self.fixed is None:
            self.fixed = np.zeros(n, dtype=bool)
        self.fixed = np.asarray(self.fixed, dtype=bool)

    def copy_with(self, values: np.ndarray) -> "ParameterSet":
        return ParameterSet(
            values=np.asarray(values, dtype=np.float64).copy(),
            names=list(self.names),
            step_sizes=self.step_sizes.copy(),
            bounds=list(self.bounds),
            fixed=self.fixed.copy(),
        )

    def slot(self, name: str) -> int:
        return self.names.index(name)


@dataclass
class FitResult:
    best_parameters: ParameterSet
    objective_value: float
    iterations: int
    objective_evaluations: int
    converged: bool


# -- model ----------------------------------------------------------------

def model_expected(
    dataset: MusrDataset,
    expr: TheoryExpr,
    p: np.ndarray,
    constants: PhysicsConstants = PhysicsConstants(),
) -> np.ndarray:
    """Expected counts for every bin of the histogram (including bins before
    t0; objectives mask those out)."""
    t = dataset.times()
    a = expr(t, p, dataset.binding)
    n0 = p[dataset.n0_slot]
    nbkg = p[dataset.nbkg_slot]
    return n0 * np.exp(-t / constants.tau_mu) * (1.0 + a) + nbkg


def model_bin(
    dataset: MusrDataset,
    expr: TheoryExpr,
    p: np.ndarray,
    n: int,
    constants: PhysicsConstants = PhysicsConstants(),
) -> float:
    if not 0 <= n < len(dataset.counts):
        raise MusrError(f"bin {n} outside histogram of length {len(dataset.counts)}")
    t = (n - dataset.t0_bin) * dataset.dt
    a = expr(t, np.asarray(p, dtype=np.float64), dataset.binding)
    return float(p[dataset.n0_slot] * np.exp(-t / constants.tau_mu) * (1.0 + a) + p[dataset.nbkg_slot])


# -- objectives -----------------------------------------------------------

def chi2(
    datasets: Sequence[MusrDataset],
    expr: TheoryExpr,
    p: np.ndarray,
    backend: Backend,
    constants: PhysicsConstants = PhysicsConstants(),
) -> float:
    """Sum over datasets and in-range bins of (d - N)^2 / err^2."""
    p = np.asarray(p, dtype=np.float64)
    total = 0.0
    for ds in datasets:
        mask = ds.range_mask()
        if not mask.any():
            raise MusrError(f"detector {ds.detector_index}: empty fit range")
        model = model_expected(ds, expr, p, constants)[mask]
        d = ds.counts[mask]
        err = ds.errors()[mask]
        total += backend.map_reduce(
            lambda dd, mm, ee: ((dd - mm) / ee) ** 2, d, model, err
        )
    return total


def mlh(
    datasets: Sequence[MusrDataset],
    expr: TheoryExpr,
    p: np.ndarray,
    backend: Backend,
    constants: PhysicsConstants = PhysicsConstants(),
) -> float:
    """2 * sum of (N - d) + d*log(d/N); minimized, zero at a perfect fit."""
    p = np.asarray(p, dtype=np.float64)
    total = 0.0
    for ds in datasets:
        mask = ds.range_mask()
        if not mask.any():
            raise MusrError(f"detector {ds.detector_index}: empty fit range")
        model = model_expected(ds, expr, p, constants)[mask]
        d = ds.counts[mask]
        if np.any(model <= 0):
            bad = int(np.flatnonzero(mask)[np.argmax(model <= 0)])
            raise MusrError(
                f"detector {ds.detector_index}: model is non-positive at bin {bad}"
            )

        def terms(dd, mm):
            with np.errstate(divide="ignore", invalid="ignore"):
                logterm = np.where(dd > 0, dd * np.log(np.where(dd > 0, dd, 1.0) / mm), 0.0)
            return 2.0 * ((mm - dd) + logterm)

        total += backend.map_reduce(terms, d, model)
    return total


OBJECTIVES = {"chi2": chi2, "mlh": mlh}


def degrees_of_freedom(datasets: Sequence[MusrDataset], params: ParameterSet) -> int:
    nbins = sum(int(ds.range_mask().sum()) for ds in datasets)
    nfree = int((~params.fixed).sum())
    return nbins - nfree


# -- fit driver -----------------------------------------------------------

def minimize(
    objective: str,
    datasets: Sequence[MusrDataset],
    expr: TheoryExpr,
    params: ParameterSet,
    backend: Backend,
    constants: PhysicsConstants = PhysicsConstants(),
    config: Optional[MinimizeConfig] = None,
    objective_fn=None,
) -> FitResult:
    """Simplex descent over the free parameters.

    objective_fn is a test hook: when given, it is called as fn(p_full)
    instead of the named objective.
    """
    if objective_fn is None:
        obj = OBJECTIVES[objective]
        objective_fn = lambda p: obj(datasets, expr, p, backend, constants)

    free = np.flatnonzero(~params.fixed)
    full = params.values.copy()

    if len(free) == 0:
        value = float(objective_fn(full))
        return FitResult(
            best_parameters=params.copy_with(full),
            objective_value=value,
            iterations=0,
            objective_evaluations=1,
            converged=True,
        )

    steps = params.step_sizes[free]
    if np.any(steps <= 0):
        raise MusrError("free parameters need positive step sizes")
    lo = np.array([(params.bounds[k] or (-np.inf, np.inf))[0] for k in free], dtype=np.float64)
    hi = np.array([(params.bounds[k] or (-np.inf, np.inf))[1] for k in free], dtype=np.float64)

    def reduced(x: np.ndarray) -> float:
        full[free] = x
        return float(objective_fn(full))

    result = nelder_mead(reduced, params.values[free], steps, lo, hi, config)
    full[free] = result.x
    return FitResult(
        best_parameters=params.copy_with(full),
        objective_value=result.fun,
        iterations=result.iterations,
        objective_evaluations=result.evaluations,
        converged=result.converged,
    )


# -- synthetic data -------------------------------------------------------

def generate_synthetic(
    truth: ParameterSet,
    expr: TheoryExpr,
    bindings: Sequence[TheoryBinding],
    n0_slots: Sequence[int],
    nbkg_slots: Sequence[int],
    nbins: int,
    dt: float,
    seed: int,
    t0_bin: int = 0,
    constants: PhysicsConstants = PhysicsConstants(),
) -> list:
    """Poisson-sampled histograms, one per binding, deterministic per seed."""
    rng = np.random.default_rng(seed)
    datasets = []
    for j, binding in enumerate(bindings):
        ds = MusrDataset(
            detector_index=j,
            counts=np.zeros(nbins, dtype=np.int64),
            dt=dt,
            t0_bin=t0_bin,
            binding=binding,
            n0_slot=n0_slots[j],
            nbkg_slot=nbkg_slots[j],
        )
        expected = model_expected(ds, expr, truth.values, constants)
        if np.any(expected < 0):
            bad = int(np.argmax(expected < 0))
            raise MusrError(f"detector {j}: negative expected count at bin {bad}")
        ds.counts = rng.poisson(expected).astype(np.float64)
        datasets.append(ds)
    return datasets


def default_phases(n_detectors: int = 16) -> np.ndarray:
    """Detector phases in degrees: phi_j = j * (360 / n)."""
    return np.arange(n_detectors) * (360.0 / n_detectors)
