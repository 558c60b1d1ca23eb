"""Deterministic CPU toolkit for muSR parameter fitting and list-mode MLEM
PET reconstruction with sphere-based feature analysis.

All heavy computation dispatches through an interchangeable execution
backend (serial or threaded) whose primitives are bit-deterministic, so
every pipeline output is reproducible regardless of worker count.
"""

from .backend import Backend, DeviceBuffer, pairwise_sum

__all__ = ["Backend", "DeviceBuffer", "pairwise_sum"]
__version__ = "0.1.0"
