"""Correction searches: locate the exact rank of a key starting from a prediction.

Binary correction trusts the prediction's [lo, hi] window; exponential
correction trusts nothing and doubles a radius around the predicted value
until the key is bracketed, so it finds every present key even under
arbitrary prediction error (required once sampling can break error bounds).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import PredictedPosition


@dataclass(frozen=True)
class SearchResult:
    position: int | None
    probes: int

    @property
    def found(self) -> bool:
        return self.position is not None


def _key_array(dataset) -> np.ndarray:
    return dataset.keys if hasattr(dataset, "keys") else np.asarray(dataset)


def correct_binary(dataset, guess: PredictedPosition, key) -> SearchResult:
    """Binary search within [guess.lo, guess.hi]; each array access is one probe.

    Probe count is at most ceil(log2(window)) + 1. Misses keys outside the
    window by design; use correct_exponential when the window may be invalid.
    """
    keys = _key_array(dataset)
    n = keys.size
    key = int(key)
    lo = max(0, guess.lo)
    hi = min(n - 1, guess.hi)
    probes = 0
    while lo <= hi:
        mid = (lo + hi) // 2
        probes += 1
        k = int(keys[mid])
        if k == key:
            return SearchResult(mid, probes)
        if k < key:
            lo = mid + 1
        else:
            hi = mid - 1
    return SearchResult(None, probes)


def correct_exponential(dataset, guess: PredictedPosition, key) -> SearchResult:
    """Double the search radius around guess.value until `key` is bracketed,
    then binary-search the bracket. Total for present keys regardless of the
    prediction."""
    keys = _key_array(dataset)
    n = keys.size
    key = int(key)
    pos = min(max(guess.value, 0), n - 1)
    probes = 1
    k0 = int(keys[pos])
    if k0 == key:
        return SearchResult(pos, probes)
    if k0 < key:
        r = 1
        while pos + r < n and int(keys[pos + r]) < key:
            probes += 1
            r *= 2
        if pos + r < n:
            probes += 1
        lo, hi = pos + r // 2 + 1, min(n - 1, pos + r)
    else:
        r = 1
        while pos - r >= 0 and int(keys[pos - r]) > key:
            probes += 1
            r *= 2
        if pos - r >= 0:
            probes += 1
        lo, hi = max(0, pos - r), pos - r // 2 - 1
    while lo <= hi:
        mid = (lo + hi) // 2
        probes += 1
        k = int(keys[mid])
        if k == key:
            return SearchResult(mid, probes)
        if k < key:
            lo = mid + 1
        else:
            hi = mid - 1
    return SearchResult(None, probes)
