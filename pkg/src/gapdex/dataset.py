"""Sorted key datasets: ingestion, validation, binary/CSV formats, synthetic generators.

A dataset is an immutable, strictly increasing array of unsigned 64-bit keys.
The position of a key is its rank in the array (0-based), so the pair stream
is (keys[i], i). All other modules consume this representation.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BINARY_MAGIC = b"GDXKEYS1"

SYNTHETIC_KINDS = ("linear", "piecewise-linear", "lognormal-cdf-like", "staircase")


class DataError(Exception):
    """Unreadable, malformed, or empty input data."""


@dataclass(frozen=True, eq=False)
class Dataset:
    """Strictly increasing uint64 keys; key at rank i has position i."""

    keys: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        keys = np.ascontiguousarray(self.keys, dtype=np.uint64)
        object.__setattr__(self, "keys", keys)
        if keys.size == 0:
            raise DataError("dataset must contain at least one key")
        if keys.size > 1 and not np.all(keys[1:] > keys[:-1]):
            raise DataError("keys must be strictly increasing")
        self.keys.setflags(write=False)

    @property
    def n(self) -> int:
        return int(self.keys.size)

    @property
    def positions(self) -> np.ndarray:
        return np.arange(self.n, dtype=np.int64)

    def rank_of(self, key: int) -> int | None:
        """Exact rank of `key`, or None if absent."""
        i = int(np.searchsorted(self.keys, np.uint64(key)))
        if i < self.n and int(self.keys[i]) == int(key):
            return i
        return None

    def __len__(self) -> int:
        return self.n

    def __repr__(self) -> str:
        return f"Dataset(n={self.n}, lo={int(self.keys[0])}, hi={int(self.keys[-1])})"


@dataclass(frozen=True)
class KeyPositionPair:
    key: int
    position: int


@dataclass(frozen=True)
class MonotonicityViolation:
    index_a: int
    index_b: int
    reason: str  # "duplicate-key" | "position-order"


@dataclass(frozen=True)
class MonotonicityReport:
    ok: bool
    violations: tuple[MonotonicityViolation, ...]


def validate_monotonic(pairs: Sequence[KeyPositionPair | tuple]) -> MonotonicityReport:
    """Check that positions co-order strictly with keys.

    Accepts KeyPositionPair instances or (key, position) tuples. Violations are
    reported against the original pair indices; an empty input is trivially ok.
    """
    norm = [(p.key, p.position) if isinstance(p, KeyPositionPair) else (p[0], p[1]) for p in pairs]
    order = sorted(range(len(norm)), key=lambda i: (norm[i][0], norm[i][1]))
    violations: list[MonotonicityViolation] = []
    for a, b in zip(order, order[1:]):
        ka, pa = norm[a]
        kb, pb = norm[b]
        lo, hi = min(a, b), max(a, b)
        if ka == kb:
            violations.append(MonotonicityViolation(lo, hi, "duplicate-key"))
        elif pa >= pb:
            violations.append(MonotonicityViolation(lo, hi, "position-order"))
    return MonotonicityReport(ok=not violations, violations=tuple(violations))


def _dedup_sorted(raw: np.ndarray) -> tuple[np.ndarray, int]:
    uniq = np.unique(raw)
    return uniq, int(raw.size - uniq.size)


def load_dataset(path: str | Path, fmt: str = "binary", scale: float = 1.0) -> Dataset:
    """Load keys from `path` in the given format.

    binary: 8-byte magic "GDXKEYS1", little-endian uint64 count, then that many
    little-endian uint64 keys in ascending order.
    csv: one decimal key per line, any order. Fractional values are multiplied
    by `scale` and rounded to the nearest integer (the factor is recorded in
    `meta["scale"]`).

    Duplicates are dropped and counted in `meta["duplicates_removed"]`.
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if fmt == "binary":
        return _parse_binary(blob, source=str(path))
    if fmt == "csv":
        return _parse_csv(blob, scale=scale, source=str(path))
    raise ValueError(f"unknown dataset format: {fmt!r}")


def _parse_binary(blob: bytes, source: str = "<bytes>") -> Dataset:
    if len(blob) < len(BINARY_MAGIC) + 8:
        raise DataError(f"{source}: truncated binary dataset")
    if blob[:8] != BINARY_MAGIC:
        raise DataError(f"{source}: bad magic, not a GDXKEYS1 file")
    n = int(np.frombuffer(blob, dtype="<u8", count=1, offset=8)[0])
    expect = 16 + 8 * n
    if len(blob) != expect:
        raise DataError(f"{source}: expected {expect} bytes for {n} keys, got {len(blob)}")
    if n == 0:
        raise DataError(f"{source}: empty dataset")
    keys = np.frombuffer(blob, dtype="<u8", count=n, offset=16)
    keys, dups = _dedup_sorted(keys)
    return Dataset(keys, meta={"duplicates_removed": dups, "source": source})


def _parse_csv(blob: bytes, scale: float = 1.0, source: str = "<bytes>") -> Dataset:
    text = blob.decode("utf-8", errors="strict")
    values: list[int] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            if "." in line or "e" in line or "E" in line:
                v = int(np.floor(float(line) * scale + 0.5))
            else:
                v = int(line)
        except ValueError as exc:
            raise DataError(f"{source}:{lineno}: malformed key {line!r}") from exc
        if v < 0:
            raise DataError(f"{source}:{lineno}: negative key {v}")
        values.append(v)
    if not values:
        raise DataError(f"{source}: empty input")
    keys, dups = _dedup_sorted(np.asarray(values, dtype=np.uint64))
    return Dataset(keys, meta={"duplicates_removed": dups, "scale": scale, "source": source})


def dataset_to_bytes(ds: Dataset) -> bytes:
    buf = io.BytesIO()
    buf.write(BINARY_MAGIC)
    buf.write(np.uint64(ds.n).tobytes())
    buf.write(ds.keys.astype("<u8").tobytes())
    return buf.getvalue()


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """Write the bit-exact binary format (load_dataset round-trips it)."""
    Path(path).write_bytes(dataset_to_bytes(ds))


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a deterministic synthetic dataset.

    noise is an integer key jitter amplitude; jittered keys are re-sorted and
    deduplicated, so the final count may be slightly below n when noise > 0.
    breakpoints counts slope changes of the pre-jitter key/rank curve.
    """

    kind: str
    n: int
    noise: int = 0
    breakpoints: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SYNTHETIC_KINDS:
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


def _strictify(values: np.ndarray) -> np.ndarray:
    # Force strict increase while preserving order: out[i] = max(v[i], out[i-1]+1).
    idx = np.arange(values.size, dtype=np.int64)
    return (np.maximum.accumulate(values.astype(np.int64) - idx) + idx).astype(np.uint64)

def _piece_steps(rng: np.random.Generator, pieces: int, staircase: bool) -> np.ndarray:
    if staircase:
        flat = np.ones(pieces, dtype=np.int64)
        steep = rng.integers(50, 200, size=pieces)
        steps = np.where(np.arange(pieces) % 2 == 0, flat, steep)
    else:
        steps = rng.integers(1, 40, size=pieces)
        for i in range(1, pieces):  # adjacent pieces must differ to realize a slope change
            while steps[i] == steps[i - 1]:
                steps[i] = rng.integers(1, 40)
    return steps.astype(np.int64)


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Deterministic synthetic key array for the given spec (same spec, same bytes)."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    boundaries: list[int] = []
    if spec.kind == "linear":
        step = int(rng.integers(2, 12))
        base = np.arange(n, dtype=np.int64) * step + int(rng.integers(0, 1000))
    elif spec.kind in ("piecewise-linear", "staircase"):
        pieces = spec.breakpoints + 1
        steps = _piece_steps(rng, pieces, staircase=spec.kind == "staircase")
        sizes = np.full(pieces, n // pieces, dtype=np.int64)
        sizes[: n % pieces] += 1
        per_key = np.repeat(steps, sizes)
        base = np.concatenate(([int(rng.integers(0, 1000))], per_key[:-1])).cumsum()
        boundaries = list(np.cumsum(sizes)[:-1].astype(int))
    else:  # lognormal-cdf-like
        raw = np.sort(rng.lognormal(mean=0.0, sigma=2.0, size=n))
        scaled = np.floor(raw / raw[-1] * (20.0 * n)).astype(np.int64)
        base = _strictify(scaled).astype(np.int64)
    keys = base.astype(np.int64)
    if spec.noise > 0:
        keys = keys + rng.integers(-spec.noise, spec.noise + 1, size=n)
        keys = np.maximum(keys, 0)
        keys.sort()
    keys, dups = _dedup_sorted(keys.astype(np.uint64))
    meta = {"spec": spec, "duplicates_removed": dups}
    if boundaries:
        meta["piece_boundaries"] = boundaries
    return Dataset(keys, meta=meta)


def as_pairs(data) -> tuple[np.ndarray, np.ndarray]:
    """Normalize a Dataset / SampledPairs / (keys, positions) into float64 arrays.

    Keys must be strictly increasing and positions strictly increasing; raises
    ValueError otherwise. float64 keys are exact for values below 2**53.
    """
    if isinstance(data, Dataset):
        keys = data.keys.astype(np.float64)
        pos = np.arange(data.n, dtype=np.float64)
        return keys, pos
    if hasattr(data, "keys") and hasattr(data, "positions"):
        keys = np.asarray(data.keys, dtype=np.float64)
        pos = np.asarray(data.positions, dtype=np.float64)
    else:
        raw_keys, raw_pos = data
        keys = np.asarray(raw_keys, dtype=np.float64)
        pos = np.asarray(raw_pos, dtype=np.float64)
    if keys.size != pos.size:
        raise ValueError("keys and positions must have equal length")
    if keys.size == 0:
        raise ValueError("empty pair sequence")
    if keys.size > 1 and (not np.all(np.diff(keys) > 0) or not np.all(np.diff(pos) > 0)):
        raise ValueError("pairs must be sorted with strictly increasing keys and positions")
    return keys, pos
