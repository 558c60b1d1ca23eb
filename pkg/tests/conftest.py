import numpy as np
import pytest

from blk.backend import Backend


def ref_pairwise_sum(values):
    """Independent scalar re-implementation of the documented reduction
    tree: adjacent pairs per level, odd trailing element carried up."""
    vals = [float(v) for v in values]
    if not vals:
        return 0.0
    while len(vals) > 1:
        nxt = [vals[i] + vals[i + 1] for i in range(0, len(vals) - 1, 2)]
        if len(vals) % 2:
            nxt.append(vals[-1])
        vals = nxt
    return vals[0]


@pytest.fixture(params=[1, 8], ids=["serial", "threaded8"])
def backend(request):
    return Backend(worker_count=request.param)


@pytest.fixture
def serial():
    return Backend.serial()


@pytest.fixture
def threaded():
    return Backend.threaded(8)
