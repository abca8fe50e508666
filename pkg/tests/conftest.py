import numpy as np
import pytest

from knots.checkpoint_io import TaskUpdate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def low_rank_updates(rng, n, shape, rank, keys=("w",)):
    o, i = shape
    return [
        TaskUpdate({k: rng.standard_normal((o, rank)) @ rng.standard_normal((rank, i)) for k in keys}, f"m{j}")
        for j in range(n)
    ]


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for r in range(a.shape[0]):
        for c in range(b.shape[1]):
            for t in range(a.shape[1]):
                out[r, c] += float(a[r, t]) * float(b[t, c])
    return out
