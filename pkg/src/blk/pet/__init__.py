from .geometry import Image3D, ScannerGeometry
from .projector import (
    LOR_SKIP,
    LOR_X,
    LOR_Y,
    ReconConfig,
    backward_project,
    classify_lor,
    classify_lors,
    compute_sensitivity,
    forward_project,
    matrix_elements_at_plane,
    sort_events,
)
from .mlem import ReconResult, listmode_log_likelihood, mlem_iterate, reconstruct
from .simulate import PhantomSphere, derenzo_phantom, simulate_listmode

__all__ = [
    "Image3D",
    "ScannerGeometry",
    "ReconConfig",
    "LOR_SKIP",
    "LOR_X",
    "LOR_Y",
    "classify_lor",
    "classify_lors",
    "sort_events",
    "matrix_elements_at_plane",
    "forward_project",
    "backward_project",
    "compute_sensitivity",
    "mlem_iterate",
    "reconstruct",
    "ReconResult",
    "listmode_log_likelihood",
    "PhantomSphere",
    "derenzo_phantom",
    "simulate_listmode",
]
