"""Common utilities"""

from typing import Iterable, Sequence

import numpy as np

from editdiff.types import ModelError


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Create an independent, reproducible random stream.

    Streams are Philox (counter-based) generators keyed by the seed and an
    arbitrary path of integer keys, so that e.g. make_rng(seed, epoch, batch)
    never overlaps make_rng(seed, epoch, batch + 1). Identical arguments give
    identical streams on every platform.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(k) for k in keys)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *keys: int) -> int:
    """Derive a 63-bit seed for a sub-computation from a seed and key path."""
    return int(make_rng(seed, *keys).integers(0, 2**63 - 1))


def argmax_rows(probs: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest token id."""
    return np.argmax(probs, axis=-1)


def check_rows_normalized(probs: np.ndarray, what: str, tol: float = 1e-9) -> None:
    """Raise ModelError unless every row of 'probs' sums to 1 within 'tol'."""
    sums = probs.sum(axis=-1)
    if probs.size and not np.all(np.abs(sums - 1.0) <= tol):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise ModelError(f"{what}: rows do not sum to 1 (max deviation {worst:.3g})")


def median_ms(durations_ns: Iterable[int]) -> float:
    """Median of nanosecond durations, in milliseconds (0.0 when empty)."""
    values: Sequence[int] = list(durations_ns)
    if not values:
        return 0.0
    return float(np.median(np.asarray(values, dtype=np.float64))) / 1e6
