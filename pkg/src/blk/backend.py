"""Execution backends: buffer lifecycle plus three parallel primitives.

Two backends are provided, Serial and Threaded(n).  Both are required to
produce bit-identical results for every primitive, which is what makes the
rest of the toolkit reproducible: the reduction tree shape is fixed by
element index, never by worker count, and scatter_add preserves the input
order of contributions per target slot.

The primitives are map_reduce (elementwise kernel + global sum),
sort_by_key (stable) and scatter_add (race-free accumulation).  An
accelerator backend could be slotted in behind the same buffer
allocate/write/read/free lifecycle later; only CPU variants exist today.
"""

from __future__ import annotations

import atexit
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

# Chunk granularity for splitting elementwise work across workers.  A fixed
# constant, independent of worker count, so chunk boundaries never depend on
# the backend configuration.
CHUNK = 1 << 14

_ELEMENT_DTYPES = {
    "f64": np.dtype(np.float64),
    "f32": np.dtype(np.float32),
    "u32": np.dtype(np.uint32),
}


class BackendError(RuntimeError):
    """Raised for precondition violations on backend primitives."""


class AllocationError(BackendError):
    """Raised when a buffer cannot be allocated."""


@dataclass
class DeviceBuffer:
    """Fixed-length typed buffer with an allocate/write/read lifecycle.

    Single-owner: callers must not issue concurrent operations against the
    same buffer.
    """

    data: np.ndarray
    element_kind: str

    @property
    def length(self) -> int:
        return len(self.data)

    def write(self, values, offset: int = 0) -> None:
        values = np.asarray(values, dtype=self.data.dtype)
        if offset < 0 or offset + len(values) > self.length:
            raise BackendError(
                f"write of {len(values)} elements at offset {offset} exceeds "
                f"buffer length {self.length}"
            )
        self.data[offset : offset + len(values)] = values

    def read(self, count: Optional[int] = None, offset: int = 0) -> np.ndarray:
        if count is None:
            count = self.length - offset
        if offset < 0 or offset + count > self.length:
            raise BackendError(
                f"read of {count} elements at offset {offset} exceeds "
                f"buffer length {self.length}"
            )
        return self.data[offset : offset + count].copy()


def pairwise_sum(terms: np.ndarray) -> float:
    """Sum with a fixed-shape binary tree: adjacent pairs per level, an odd
    trailing element carried up unchanged.  The tree depends only on the
    array length, so the result is reproducible for a given term sequence.
    """
    a = np.asarray(terms, dtype=np.float64)
    if a.ndim != 1:
        raise BackendError("pairwise_sum expects a 1-D array")
    if a.size == 0:
        return 0.0
    while a.size > 1:
        half = a.size // 2
        paired = a[: 2 * half : 2] + a[1 : 2 * half : 2]
        if a.size % 2:
            paired = np.concatenate([paired, a[-1:]])
        a = paired
    return float(a[0])


@dataclass(frozen=True)
class Backend:
    """Serial or Threaded(worker_count) execution backend.

    Immutable and shareable across threads.  Serial behaves exactly as
    Threaded(1); all primitives are bit-deterministic across backends.
    """

    worker_count: int = 1
    _pool: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.worker_count < 1:
            raise BackendError("worker_count must be >= 1")

    @classmethod
    def serial(cls) -> "Backend":
        return cls(worker_count=1)

    @classmethod
    def threaded(cls, worker_count: int) -> "Backend":
        return cls(worker_count=worker_count)

    @property
    def kind(self) -> str:
        return "Serial" if self.worker_count == 1 else f"Threaded({self.worker_count})"

    # -- buffers ----------------------------------------------------------

    def allocate(self, element_kind: str, length: int, dtype=None) -> DeviceBuffer:
        if length < 0:
            raise AllocationError(f"negative buffer length {length}")
        if element_kind == "record":
            if dtype is None:
                raise AllocationError("record buffers need an explicit dtype")
            dt = np.dtype(dtype)
        else:
            try:
                dt = _ELEMENT_DTYPES[element_kind]
            except KeyError:
                raise AllocationError(f"unknown element kind {element_kind!r}") from None
        try:
            data = np.zeros(length, dtype=dt)
        except MemoryError as exc:
            raise AllocationError(f"cannot allocate {length} x {dt}") from exc
        return DeviceBuffer(data=data, element_kind=element_kind)

    # -- worker pool ------------------------------------------------------

    def _executor(self) -> Optional[ThreadPoolExecutor]:
        if self.worker_count == 1:
            return None
        pool = self._pool.get("executor")
        if pool is None:
            pool = ThreadPoolExecutor(max_workers=self.worker_count)
            self._pool["executor"] = pool
            atexit.register(pool.shutdown, wait=False)
        return pool

    def run_chunked(
        self, fn: Callable[[int, int], object], n: int, chunk: int = CHUNK
    ) -> list:
        """Evaluate fn(lo, hi) over fixed chunks of [0, n) and return the
        results in chunk order.  Chunk boundaries depend only on n, so the
        assembled result is independent of worker count (fn must be pure).
        """
        if n < 0:
            raise BackendError("negative range length")
        bounds = [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]
        pool = self._executor()
        if pool is None or len(bounds) <= 1:
            return [fn(lo, hi) for lo, hi in bounds]
        return list(pool.map(lambda b: fn(b[0], b[1]), bounds))

    # -- primitives -------------------------------------------------------

    def map_reduce(
        self,
        fn: Callable,
        *arrays: np.ndarray,
        length: Optional[int] = None,
    ) -> float:
        """Sum of an elementwise kernel over equal-length input ranges.

        With input arrays, fn receives aligned chunk views and returns the
        per-element terms for that chunk.  Without arrays, fn(lo, hi) must
        return the terms for index range [lo, hi).  The global sum is the
        fixed pairwise tree over the canonical term array.
        """
        if arrays:
            views = [b.data if isinstance(b, DeviceBuffer) else np.asarray(b) for b in arrays]
            n = len(views[0])
            if any(len(v) != n for v in views):
                raise BackendError("map_reduce input ranges have mismatched lengths")
            if length is not None and length != n:
                raise BackendError("explicit length disagrees with input ranges")
            kernel = lambda lo, hi: np.asarray(fn(*[v[lo:hi] for v in views]), dtype=np.float64)
        else:
            if length is None:
                raise BackendError("map_reduce needs input arrays or a length")
            n = length
            kernel = lambda lo, hi: np.asarray(fn(lo, hi), dtype=np.float64)
        if n == 0:
            return 0.0
        chunks = self.run_chunked(kernel, n)
        for (lo, hi), c in zip([(lo, min(lo + CHUNK, n)) for lo in range(0, n, CHUNK)], chunks):
            if len(c) != hi - lo:
                raise BackendError("map_reduce kernel returned a wrong-sized chunk")
        terms = chunks[0] if len(chunks) == 1 else np.concatenate(chunks)
        return pairwise_sum(terms)

    def sort_by_key(self, keys, values):
        """Stable sort of values by u32 keys; returns (keys, values) copies.

        Both backends defer to the same stable mergesort: a chunked parallel
        merge buys nothing under the interpreter lock, and sharing the code
        path makes bit-equality trivial.
        """
        keys_arr = keys.data if isinstance(keys, DeviceBuffer) else np.asarray(keys)
        vals_arr = values.data if isinstance(values, DeviceBuffer) else np.asarray(values)
        if len(keys_arr) != len(vals_arr):
            raise BackendError(
                f"sort_by_key length mismatch: {len(keys_arr)} keys, {len(vals_arr)} values"
            )
        order = np.argsort(keys_arr, kind="stable")
        return keys_arr[order], vals_arr[order]

    def scatter_add(self, target, indices, deltas) -> None:
        """target[j] += sum of deltas whose index is j, in input order.

        Workers own disjoint contiguous slot ranges and each scans the full
        contribution list for its slots, so per-slot accumulation order is
        the input order regardless of worker count.
        """
        tgt = target.data if isinstance(target, DeviceBuffer) else target
        idx = np.asarray(indices)
        dl = np.asarray(deltas)
        if len(idx) != len(dl):
            raise BackendError(
                f"scatter_add length mismatch: {len(idx)} indices, {len(dl)} deltas"
            )
        if len(idx) == 0:
            return
        if idx.min() < 0 or idx.max() >= len(tgt):
            bad = idx[(idx < 0) | (idx >= len(tgt))][0]
            raise BackendError(f"scatter_add index {bad} out of range for length {len(tgt)}")
        pool = self._executor()
        if pool is None or len(idx) < 4 * CHUNK:
            np.add.at(tgt, idx, dl.astype(tgt.dtype, copy=False))
            return

        nslots = len(tgt)
        w = min(self.worker_count, nslots)
        edges = [nslots * i // w for i in range(w + 1)]

        def apply_range(lo_hi):
            lo, hi = lo_hi
            mask = (idx >= lo) & (idx < hi)
            np.add.at(tgt, idx[mask], dl[mask].astype(tgt.dtype, copy=False))

        list(pool.map(apply_range, zip(edges[:-1], edges[1:])))


def resolve_worker_count(
    flag_value: Optional[int] = None, env: Optional[dict] = None
) -> int:
    """Worker count from the --threads flag, else BLK_THREADS, else 1."""
    import os

    if flag_value is not None:
        if flag_value < 1:
            raise BackendError("--threads must be >= 1")
        return flag_value
    env = env if env is not None else os.environ
    raw = env.get("BLK_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise BackendError(f"BLK_THREADS is not an integer: {raw!r}") from None
    if n < 1:
        raise BackendError(f"BLK_THREADS must be >= 1, got {n}")
    return n
