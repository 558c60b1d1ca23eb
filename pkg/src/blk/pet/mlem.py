"""List-mode MLEM iteration driver.

One iteration is the multiplicative update

    f_j <- (f_j / s_j) * sum_l a_{c(l),j} / ybar_{c(l)}

with ybar the forward projection of the current image.  Voxels whose
sensitivity s_j is zero stay frozen at zero.  The driver classifies and
sorts the event list once per list change and optionally truncates the
list to its first half after every iteration (event halving), stopping
early when the list runs empty.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..backend import Backend, pairwise_sum
from .geometry import GeometryError, Image3D, ScannerGeometry
from .projector import (
    ReconConfig,
    backward_project,
    classify_lors,
    compute_sensitivity,
    forward_project,
    sort_events,
)


@dataclass
class ReconResult:
    image: Image3D
    iterations_done: int
    events_per_iteration: list = field(default_factory=list)


def mlem_iterate(
    image: Image3D,
    events,
    sensitivity: Image3D,
    geometry: ScannerGeometry,
    config: ReconConfig,
    backend: Backend,
) -> Image3D:
    """One multiplicative update of the image."""
    ybar = forward_project(events, image, geometry, config, backend)
    correction = backward_project(events, ybar, image, geometry, config, backend)
    s = sensitivity.data
    out = image.like()
    nz = s > 0
    out.data[nz] = image.data[nz] / s[nz] * correction.data[nz]
    return out


def reconstruct(
    events,
    initial: Image3D,
    geometry: ScannerGeometry,
    config: ReconConfig,
    backend: Backend,
    sensitivity: Optional[Image3D] = None,
) -> ReconResult:
    """Run the full iteration loop.

    The sensitivity image is computed once from the initial event list;
    with halving enabled the list is cut to its first half after each
    iteration and re-sorted, and the loop stops early once it is empty.
    """
    ev = np.asarray(events, dtype=np.int64).reshape(-1, 2)
    if sensitivity is None:
        sensitivity = compute_sensitivity(ev, initial, geometry, config, backend)
    image = initial.copy()

    result = ReconResult(image=image, iterations_done=0)
    # Sort once up front; halving truncates the sorted list, which stays
    # grouped by label, so no re-sort is needed on a list change.
    labels = classify_lors(ev, geometry, image)
    current, _ = sort_events(ev, labels, backend)
    for _ in range(config.iterations):
        if len(current) == 0:
            break
        result.events_per_iteration.append(len(current))
        image = mlem_iterate(image, current, sensitivity, geometry, config, backend)
        result.iterations_done += 1
        if config.event_halving:
            current = current[: len(current) // 2]
    result.image = image
    return result


def listmode_log_likelihood(
    events,
    image: Image3D,
    sensitivity: Image3D,
    geometry: ScannerGeometry,
    config: ReconConfig,
    backend: Backend,
) -> float:
    """sum_l log(ybar_{c(l)}) - sum_j s_j f_j for monotonicity checks."""
    ybar = forward_project(events, image, geometry, config, backend)
    if np.any(ybar <= 0):
        raise GeometryError("log-likelihood undefined: an event has ybar <= 0")
    return pairwise_sum(np.log(ybar)) - pairwise_sum(sensitivity.data * image.data)
