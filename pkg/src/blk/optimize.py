"""Derivative-free simplex minimizer.

Nelder-Mead with the dimension-adaptive coefficients of Gao & Han, bound
clamping, and a single restart from the best point found.  Derivative-free
is the right fit here: objectives are built from user-defined theory
expressions, so no gradients are available in general.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class OptimizeError(RuntimeError):
    pass


@dataclass
class MinimizeConfig:
    tol_f: float = 1e-9          # relative spread of simplex objective values
    max_evaluations: int = 0     # 0 -> 400 * dimension
    restarts: int = 1


@dataclass
class MinimizeResult:
    x: np.ndarray
    fun: float
    iterations: int
    evaluations: int
    converged: bool


def _clamp(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    return np.minimum(np.maximum(x, lo), hi)


def nelder_mead(
    fn: Callable[[np.ndarray], float],
    x0: Sequence[float],
    steps: Sequence[float],
    bounds_lo: Optional[Sequence[float]] = None,
    bounds_hi: Optional[Sequence[float]] = None,
    config: Optional[MinimizeConfig] = None,
) -> MinimizeResult:
    """Minimize fn starting from x0 with per-coordinate initial steps.

    steps must be positive; bounds (optional, +-inf where absent) are
    enforced by clamping every trial point.
    """
    config = config or MinimizeConfig()
    x0 = np.asarray(x0, dtype=np.float64)
    steps = np.asarray(steps, dtype=np.float64)
    n = len(x0)
    if n == 0:
        raise OptimizeError("no free coordinates to optimize")
    if np.any(steps <= 0):
        raise OptimizeError("all step sizes must be positive")
    lo = np.full(n, -np.inf) if bounds_lo is None else np.asarray(bounds_lo, dtype=np.float64)
    hi = np.full(n, np.inf) if bounds_hi is None else np.asarray(bounds_hi, dtype=np.float64)
    max_evals = config.max_evaluations or 400 * n

    # Gao & Han adaptive coefficients
    alpha = 1.0
    beta = 1.0 + 2.0 / n
    gamma = 0.75 - 1.0 / (2.0 * n)
    delta = 1.0 - 1.0 / n if n > 1 else 0.5

    evals = 0
    iterations = 0

    def call(x):
        nonlocal evals
        evals += 1
        v = float(fn(x))
        return v

    f0 = call(_clamp(x0, lo, hi))
    if not np.isfinite(f0):
        raise OptimizeError(f"objective is not finite at the initial point ({f0})")

    best_x = _clamp(x0, lo, hi).copy()
    best_f = f0
    converged = False

    for restart in range(config.restarts + 1):
        # initial simplex around the current best point
        verts = [best_x.copy()]
        for k in range(n):
            v = best_x.copy()
            v[k] += steps[k]
            verts.append(_clamp(v, lo, hi))
        fvals = [best_f] + [call(v) for v in verts[1:]]
        verts = np.array(verts)
        fvals = np.array(fvals)

        while evals < max_evals:
            order = np.argsort(fvals, kind="stable")
            verts = verts[order]
            fvals = fvals[order]
            spread = abs(fvals[-1] - fvals[0])
            scale = max(abs(fvals[0]), abs(fvals[-1]), 1e-300)
            if spread <= config.tol_f * scale:
                converged = True
                break
            iterations += 1

            centroid = verts[:-1].mean(axis=0)
            xr = _clamp(centroid + alpha * (centroid - verts[-1]), lo, hi)
            fr = call(xr)
            if fr < fvals[0]:
                xe = _clamp(centroid + beta * (xr - centroid), lo, hi)
                fe = call(xe)
                if fe < fr:
                    verts[-1], fvals[-1] = xe, fe
                else:
                    verts[-1], fvals[-1] = xr, fr
            elif fr < fvals[-2]:
                verts[-1], fvals[-1] = xr, fr
            else:
                if fr < fvals[-1]:
                    xc = _clamp(centroid + gamma * (xr - centroid), lo, hi)
                else:
                    xc = _clamp(centroid - gamma * (centroid - verts[-1]), lo, hi)
                fc = call(xc)
                if fc < min(fr, fvals[-1]):
                    verts[-1], fvals[-1] = xc, fc
                else:
                    # shrink toward the best vertex
                    for k in range(1, n + 1):
                        verts[k] = _clamp(verts[0] + delta * (verts[k] - verts[0]), lo, hi)
                        fvals[k] = call(verts[k])

        imin = int(np.argmin(fvals))
        if fvals[imin] < best_f:
            best_f = float(fvals[imin])
            best_x = verts[imin].copy()
        if evals >= max_evals:
            break

    return MinimizeResult(
        x=best_x, fun=best_f, iterations=iterations, evaluations=evals, converged=converged
    )
