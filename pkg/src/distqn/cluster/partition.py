from __future__ import annotations

from typing import Sequence

import numpy as np

from ..models import DataShard, Dataset


def partition_data(ds: Dataset, M: int, seed: int = 0) -> list[DataShard]:
    """Shuffle rows with a seeded permutation and cut them into ``M`` equal blocks."""
    if M < 1:
        raise ValueError("M must be at least 1")
    if ds.N % M != 0:
        raise ValueError(f"M={M} does not divide N={ds.N}; equal shards are required")
    n = ds.N // M
    perm = np.random.default_rng(seed).permutation(ds.N)
    return [
        DataShard(m, ds.X[perm[m * n:(m + 1) * n]], ds.Y[perm[m * n:(m + 1) * n]], ds.kind)
        for m in range(M)
    ]


def average(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Mean of vectors summed strictly in the given (worker-id) order."""
    it = iter(vectors)
    acc = np.array(next(it), dtype=np.float64)
    count = 1
    for v in it:
        acc += v
        count += 1
    return acc / count
