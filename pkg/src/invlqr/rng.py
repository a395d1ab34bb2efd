"""Seeded random streams used everywhere randomness is needed.

All sampling is driven by the Philox 4x64 counter-based generator (numpy's
``np.random.Philox``, stream version fixed by numpy's compatibility policy).
A stream is keyed by two 64-bit words: the user seed and a stream identifier,
so independent concerns (initial conditions, measurement noise, reference
perturbations, solver restarts) never share draws.  Per-trajectory substreams
are derived as ``seed + trajectory_index`` in the first key word, which keeps
trajectory ``i`` reproducible regardless of how many trajectories a dataset
contains.

Gaussian variates are produced with the Marsaglia polar variant of the
Box-Muller transform on the generator's uniforms.  Reimplementing Philox plus
the polar method in another runtime reproduces these streams distributionally.
"""

from __future__ import annotations

import math

import numpy as np

# Stream identifiers (second Philox key word).
STREAM_INITIAL_CONDITIONS = 0
STREAM_MEASUREMENT_NOISE = 1
STREAM_REFERENCE = 2
STREAM_RESTARTS = 3
STREAM_VALIDATION = 4

_MASK64 = (1 << 64) - 1


def substream(seed: int, stream: int) -> np.random.Generator:
    """Return the generator keyed by ``(seed, stream)``."""
    key = np.array([seed & _MASK64, stream & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def uniform(rng: np.random.Generator, lower, upper, size) -> np.ndarray:
    """Uniform samples over ``[lower, upper)``; bounds broadcast over ``size``."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    return lower + (upper - lower) * rng.random(size)


def gaussian(rng: np.random.Generator, size: int) -> np.ndarray:
    """Standard normal samples via the polar Box-Muller transform."""
    out = np.empty(size, dtype=float)
    i = 0
    while i < size:
        u = 2.0 * rng.random() - 1.0
        v = 2.0 * rng.random() - 1.0
        s = u * u + v * v
        if s >= 1.0 or s == 0.0:
            continue
        f = math.sqrt(-2.0 * math.log(s) / s)
        out[i] = u * f
        i += 1
        if i < size:
            out[i] = v * f
            i += 1
    return out
