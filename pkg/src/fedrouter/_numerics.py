"""Small numeric helpers shared across modules: seeding and compensated sums."""
from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for a (seed, key...) path.

    Every random stream in the package is addressed this way so that runs
    are a pure function of the master seed.
    """
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, *[int(k) for k in keys]])


def neumaier_sum(arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise compensated sum of equally shaped arrays."""
    if not arrays:
        raise ValueError("nothing to sum")
    total = np.array(arrays[0], dtype=np.float64, copy=True)
    comp = np.zeros_like(total)
    for a in arrays[1:]:
        t = total + a
        big = np.abs(total) >= np.abs(a)
        comp += np.where(big, (total - t) + a, (a - t) + total)
        total = t
    return total + comp


def fsum(values: Iterable[float]) -> float:
    return math.fsum(float(v) for v in values)


def fmean(values: Sequence[float]) -> float:
    values = list(values)
    if not values:
        return float("nan")
    return math.fsum(values) / len(values)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))
