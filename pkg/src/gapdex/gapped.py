"""Result-driven gap insertion and the gapped physical layout.

Planning stretches each fitted segment about its first anchor by (1 + rho),
placing every key on the segment's anchor line (the line through the first
and last data points after gap insertion); whole-segment offsets accumulate
the gap counts of earlier segments. With rho = 0 the plan is the identity:
no gaps means no re-distribution.

The physical layout is a slotted array G plus secondary linking arrays: each
key lands on its predicted slot when that slot is empty and order-compatible,
otherwise it joins the linking array anchored at the slot of the largest
occupied key at or below it, whose minimum entry always occupies the slot.
Empty slots cache the key of the first occupied slot to their right (max-u64
sentinel past the last occupied slot), which keeps G totally ordered and lets
lookups run an exponential search straight over the slot array.

Reads may run concurrently; any mutation needs exclusive access (no internal
locking).
"""

from __future__ import annotations

import bisect
import io
import math
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, as_pairs
from .models import SegmentIndex, fit_greedy_cone, fit_optimal_pla, round_half_up
from .sampling import SampledPairs, SampleSpec, sample_uniform

GAPPED_MAGIC = b"GDXGAP01"

# Cached key of empty slots right of the last occupied slot. Real keys must be
# strictly below this.
SLOT_KEY_SENTINEL = np.uint64(np.iinfo(np.uint64).max)


class DuplicateKeyError(ValueError):
    """Insert of a key that is already stored (use update instead)."""


@dataclass(frozen=True)
class GapPlan:
    """Per-key real-valued target positions plus per-segment gap accounting."""

    rho: float
    keys: np.ndarray          # planned keys, ascending
    targets: np.ndarray       # float64 target positions, strictly increasing
    gap_counts: tuple[int, ...]
    anchors: tuple[tuple[tuple[int, int], tuple[int, int]], ...]

    @property
    def total_gaps(self) -> int:
        return int(sum(self.gap_counts))

    @property
    def array_size(self) -> int:
        return int(math.ceil(float(self.targets[-1]))) + 1


def plan_gaps(index: SegmentIndex, data, rho: float) -> GapPlan:
    """Compute gap-inserted target positions for `data` under `index`'s segments.

    Per segment the gap count is round(rho * position span); the first anchor
    shifts by the gaps of earlier segments and every key is placed on the line
    from the first anchor to the stretched last anchor. rho = 0 returns the
    original positions unchanged.
    """
    if rho < 0:
        raise ValueError("rho must be >= 0")
    keys_f, pos_f = as_pairs(data)
    keys_u64 = np.asarray(keys_f, dtype=np.uint64)
    if rho == 0:
        targets = pos_f.copy()
    else:
        targets = np.empty_like(pos_f)
    seg_first = np.array([s.first_key for s in index.segments], dtype=np.float64)
    seg_ids = np.searchsorted(seg_first, keys_f, side="right") - 1
    np.clip(seg_ids, 0, len(index.segments) - 1, out=seg_ids)
    bounds = np.searchsorted(seg_ids, np.arange(len(index.segments) + 1))
    gap_counts: list[int] = []
    anchors = []
    prefix = 0
    for k in range(len(index.segments)):
        a, b = int(bounds[k]), int(bounds[k + 1])
        if a == b:
            continue
        y1, ym = pos_f[a], pos_f[b - 1]
        x1, xm = keys_f[a], keys_f[b - 1]
        span = ym - y1
        gaps = round_half_up(rho * span)
        first_t = y1 + prefix
        last_t = first_t + span * (1.0 + rho)
        if rho > 0:
            if b - a == 1:
                targets[a] = first_t
            else:
                targets[a:b] = first_t + (keys_f[a:b] - x1) * (span * (1.0 + rho) / (xm - x1))
        gap_counts.append(gaps)
        anchors.append(((int(x1), round_half_up(first_t)), (int(xm), round_half_up(last_t))))
        prefix += gaps
    if np.any(np.diff(targets) <= 0):
        raise AssertionError("gap targets must be strictly increasing")
    return GapPlan(rho=float(rho), keys=keys_u64, targets=targets,
                   gap_counts=tuple(gap_counts), anchors=tuple(anchors))


@dataclass
class LinkingArray:
    """Sorted (key, payload) entries colliding at one slot; min entry occupies G."""

    entries: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def keys(self) -> list[int]:
        return [k for k, _ in self.entries]


@dataclass(frozen=True)
class InsertReport:
    slot: int
    into_linking: bool


class GappedArray:
    def __init__(self, slot_keys: np.ndarray, occupied: np.ndarray,
                 payloads: np.ndarray, linking: dict[int, LinkingArray],
                 key_count: int):
        self.slot_keys = slot_keys
        self.occupied = occupied
        self.payloads = payloads
        self.linking = linking
        self.key_count = int(key_count)

    @property
    def size(self) -> int:
        return int(self.slot_keys.size)

    def __repr__(self) -> str:
        return (f"GappedArray(size={self.size}, keys={self.key_count}, "
                f"linking={len(self.linking)})")


def build_gapped(index, keys, plan: GapPlan | None = None,
                 payloads=None) -> GappedArray:
    """Place all keys into a fresh gapped array.

    Keys covered by `plan` land on their rounded plan target; the rest on the
    index's rounded prediction. A key whose slot is taken or out of order
    joins the linking array of the last occupied slot. Array size is
    ceil(max target) + 1 when a plan is given, else the index's position bound.
    """
    keys = np.ascontiguousarray(keys, dtype=np.uint64)
    n = keys.size
    if payloads is None:
        payloads = np.arange(n, dtype=np.uint64)
    else:
        payloads = np.ascontiguousarray(payloads, dtype=np.uint64)
    if n and keys[-1] >= SLOT_KEY_SENTINEL:
        raise ValueError("max uint64 key is reserved as the empty-slot sentinel")
    if plan is not None:
        size = plan.array_size
        pos = np.searchsorted(plan.keys, keys)
        safe = np.minimum(pos, plan.keys.size - 1)
        is_planned = plan.keys[safe] == keys
        desired = np.where(is_planned,
                           np.floor(plan.targets[safe] + 0.5).astype(np.int64),
                           index.predict_many(keys))
    else:
        size = index.position_bound
        desired = index.predict_many(keys)
    np.clip(desired, 0, size - 1, out=desired)

    slot_keys = np.full(size, SLOT_KEY_SENTINEL, dtype=np.uint64)
    occupied = np.zeros(size, dtype=bool)
    payload_arr = np.zeros(size, dtype=np.uint64)
    linking: dict[int, LinkingArray] = {}
    if n:
        # A key occupies its slot iff its slot exceeds every earlier desired
        # slot; non-occupiers anchor at the running maximum (the slot of the
        # largest key placed so far).
        runmax = np.maximum.accumulate(desired)
        occ_mask = np.empty(n, dtype=bool)
        occ_mask[0] = True
        occ_mask[1:] = desired[1:] > runmax[:-1]
        occ_slots = desired[occ_mask]
        occupied[occ_slots] = True
        slot_keys[occ_slots] = keys[occ_mask]
        payload_arr[occ_slots] = payloads[occ_mask]
        conflict_idx = np.nonzero(~occ_mask)[0]
        for i in conflict_idx:
            anchor = int(runmax[i - 1]) if i else 0
            arr = linking.get(anchor)
            if arr is None:
                arr = LinkingArray([(int(slot_keys[anchor]), int(payload_arr[anchor]))])
                linking[anchor] = arr
            arr.entries.append((int(keys[i]), int(payloads[i])))
    _recache_all(slot_keys, occupied)
    return GappedArray(slot_keys, occupied, payload_arr, linking, key_count=n)


def _recache_all(slot_keys: np.ndarray, occupied: np.ndarray) -> None:
    occ_idx = np.nonzero(occupied)[0]
    empty_idx = np.nonzero(~occupied)[0]
    nxt = np.searchsorted(occ_idx, empty_idx)
    has_right = nxt < occ_idx.size
    slot_keys[empty_idx[has_right]] = slot_keys[occ_idx[nxt[has_right]]]
    slot_keys[empty_idx[~has_right]] = SLOT_KEY_SENTINEL


def _leftmost_ge(g: GappedArray, hint: int, key: int) -> int:
    """Leftmost slot whose order key is >= `key` (size if none), found by an
    exponential bracket around the hint followed by a binary search."""
    sk = g.slot_keys
    size = g.size
    key_u = np.uint64(key)
    if sk[hint] >= key_u:
        r = 1
        while hint - r >= 0 and sk[hint - r] >= key_u:
            r <<= 1
        lo, hi = max(0, hint - r), hint
    else:
        r = 1
        while hint + r < size and sk[hint + r] < key_u:
            r <<= 1
        lo, hi = hint, min(size - 1, hint + r)
        if sk[hi] < key_u:
            return size
    return lo + int(np.searchsorted(sk[lo:hi + 1], key_u, side="left"))


def _resolve(g: GappedArray, left: int, key: int):
    """Map the leftmost-ge slot to (payload | None, owning occupied slot | None).

    The owning slot is the slot whose linking array could contain `key`
    (its upper-bound slot); None when the key is below every stored key.
    """
    size = g.size
    if left < size and int(g.slot_keys[left]) == key:
        r = left
        while not g.occupied[r]:
            r += 1  # empty slots caching `key` end at the occupied slot holding it
        arr = g.linking.get(r)
        if arr is not None:
            return arr.entries[0][1], r
        return int(g.payloads[r]), r
    if left == 0:
        return None, None
    y_ub = left - 1
    if not g.occupied[y_ub]:
        raise AssertionError("slot left of a leftmost-ge boundary must be occupied")
    arr = g.linking.get(y_ub)
    if arr is not None:
        i = bisect.bisect_left(arr.entries, (key,))
        if i < len(arr.entries) and arr.entries[i][0] == key:
            return arr.entries[i][1], y_ub
    return None, y_ub


def lookup(g: GappedArray, index, key) -> int | None:
    """Payload for an exact key match, else None."""
    key = int(key)
    if g.key_count == 0:
        return None
    hint = min(max(index.predict(key).value, 0), g.size - 1)
    payload, _ = _resolve(g, _leftmost_ge(g, hint, key), key)
    return payload


def search_from(g: GappedArray, slot_guess: int, key) -> int | None:
    """Lookup with an externally supplied slot guess (for correction timing)."""
    key = int(key)
    payload, _ = _resolve(g, _leftmost_ge(g, min(max(slot_guess, 0), g.size - 1), key), key)
    return payload


def _prev_occupied(g: GappedArray, slot: int) -> int:
    left = g.occupied[:slot]
    idx = np.nonzero(left)[0]
    return int(idx[-1]) if idx.size else -1


def _next_occupied(g: GappedArray, slot: int) -> int:
    right = g.occupied[slot + 1:]
    idx = np.nonzero(right)[0]
    return slot + 1 + int(idx[0]) if idx.size else g.size


def insert(g: GappedArray, index, key, payload) -> InsertReport:
    """Place a new key at its predicted slot when empty and order-compatible,
    else into the linking array at its upper-bound slot. No model retraining."""
    key = int(key)
    if key >= int(SLOT_KEY_SENTINEL):
        raise ValueError("max uint64 key is reserved as the empty-slot sentinel")
    payload = int(payload)
    yhat = min(max(index.predict(key).value, 0), g.size - 1)
    left = _leftmost_ge(g, yhat, key)
    found, y_ub = _resolve(g, left, key)
    if found is not None:
        raise DuplicateKeyError(f"key {key} already present")
    if y_ub is None:
        # Below every stored key (or empty array): claim an empty slot left of
        # the first occupied one, else displace the first occupant into its
        # linking array so the slot keeps holding the minimum.
        first = _next_occupied(g, -1)
        if first == g.size:
            slot = yhat
            g.occupied[slot] = True
            g.slot_keys[slot] = key
            g.payloads[slot] = payload
            g.slot_keys[:slot] = key
            g.key_count += 1
            return InsertReport(slot, False)
        if yhat < first:
            g.occupied[yhat] = True
            g.slot_keys[yhat] = key
            g.payloads[yhat] = payload
            g.slot_keys[:yhat] = key
            g.key_count += 1
            return InsertReport(yhat, False)
        arr = g.linking.get(first)
        if arr is None:
            arr = LinkingArray([(int(g.slot_keys[first]), int(g.payloads[first]))])
            g.linking[first] = arr
        arr.entries.insert(0, (key, payload))
        g.slot_keys[first] = key
        g.payloads[first] = payload
        g.slot_keys[:first] = key
        g.key_count += 1
        return InsertReport(first, True)
    nxt = _next_occupied(g, y_ub)
    if not g.occupied[yhat] and y_ub < yhat < nxt:
        g.occupied[yhat] = True
        g.slot_keys[yhat] = key
        g.payloads[yhat] = payload
        g.slot_keys[y_ub + 1:yhat] = key  # empties left of the new slot now cache it
        g.key_count += 1
        return InsertReport(yhat, False)
    arr = g.linking.get(y_ub)
    if arr is None:
        arr = LinkingArray([(int(g.slot_keys[y_ub]), int(g.payloads[y_ub]))])
        g.linking[y_ub] = arr
    bisect.insort(arr.entries, (key, payload))
    g.key_count += 1
    return InsertReport(y_ub, True)


def delete(g: GappedArray, index, key) -> bool:
    """Remove a key; returns False when absent. Plain slots become empty (their
    run of cached keys is repaired); two-entry linking arrays collapse back to
    a plain slot."""
    key = int(key)
    if g.key_count == 0:
        return False
    hint = min(max(index.predict(key).value, 0), g.size - 1)
    left = _leftmost_ge(g, hint, key)
    payload, slot = _resolve(g, left, key)
    if payload is None or slot is None:
        return False
    arr = g.linking.get(slot)
    if arr is None:
        if int(g.slot_keys[slot]) != key:
            return False
        prev = _prev_occupied(g, slot)
        nxt = _next_occupied(g, slot)
        cached = g.slot_keys[nxt] if nxt < g.size else SLOT_KEY_SENTINEL
        g.occupied[slot] = False
        g.slot_keys[prev + 1:slot + 1] = cached
        g.key_count -= 1
        return True
    i = bisect.bisect_left(arr.entries, (key,))
    if i >= len(arr.entries) or arr.entries[i][0] != key:
        return False
    arr.entries.pop(i)
    g.key_count -= 1
    if len(arr.entries) == 1:
        survivor_key, survivor_payload = arr.entries[0]
        del g.linking[slot]
    else:
        survivor_key, survivor_payload = arr.entries[0]
    if i == 0:
        # The minimum changed; the slot and the cached empties left of it
        # follow the new minimum.
        prev = _prev_occupied(g, slot)
        g.slot_keys[prev + 1:slot + 1] = np.uint64(survivor_key)
        g.payloads[slot] = survivor_payload
    return True


def update(g: GappedArray, index, key, payload) -> bool:
    """Overwrite the payload of a present key in place; False when absent."""
    key = int(key)
    payload = int(payload)
    if g.key_count == 0:
        return False
    hint = min(max(index.predict(key).value, 0), g.size - 1)
    left = _leftmost_ge(g, hint, key)
    found, slot = _resolve(g, left, key)
    if found is None or slot is None:
        return False
    arr = g.linking.get(slot)
    if arr is None:
        g.payloads[slot] = payload
        return True
    i = bisect.bisect_left(arr.entries, (key,))
    arr.entries[i] = (key, payload)
    if i == 0:
        g.payloads[slot] = payload
    return True


def gap_fraction(g: GappedArray) -> float:
    return float((~g.occupied).sum()) / g.size


def iter_items(g: GappedArray):
    """Yield (key, payload) pairs in ascending key order."""
    for slot in np.nonzero(g.occupied)[0]:
        arr = g.linking.get(int(slot))
        if arr is None:
            yield int(g.slot_keys[slot]), int(g.payloads[slot])
        else:
            yield from arr.entries


def physical_positions(g: GappedArray) -> tuple[np.ndarray, np.ndarray]:
    """(keys, slots) with linking-array members positioned at their anchor slot."""
    ks: list[int] = []
    slots: list[int] = []
    for slot in np.nonzero(g.occupied)[0]:
        arr = g.linking.get(int(slot))
        if arr is None:
            ks.append(int(g.slot_keys[slot]))
            slots.append(int(slot))
        else:
            for k, _ in arr.entries:
                ks.append(k)
                slots.append(int(slot))
    return np.asarray(ks, dtype=np.uint64), np.asarray(slots, dtype=np.int64)


def check_invariants(g: GappedArray) -> list[str]:
    """Full-structure audit; returns human-readable violations (empty = healthy)."""
    bad: list[str] = []
    occ_idx = np.nonzero(g.occupied)[0]
    occ_keys = g.slot_keys[occ_idx]
    if occ_idx.size and np.any(occ_keys >= SLOT_KEY_SENTINEL):
        bad.append("occupied slot holds the sentinel key")
    if occ_idx.size > 1 and not np.all(np.diff(occ_keys.astype(np.int64)) > 0):
        bad.append("occupied keys not strictly increasing")
    # cached keys of empty slots
    expect = g.slot_keys.copy()
    _recache_all(expect, g.occupied)
    empty_idx = np.nonzero(~g.occupied)[0]
    if not np.array_equal(expect[empty_idx], g.slot_keys[empty_idx]):
        bad.append("empty-slot cached keys violate the right-neighbor rule")
    count = int(occ_idx.size)
    for slot, arr in g.linking.items():
        if not g.occupied[slot]:
            bad.append(f"linking array at empty slot {slot}")
            continue
        if len(arr.entries) < 2:
            bad.append(f"linking array at {slot} shorter than 2")
        keys = arr.keys()
        if any(b <= a for a, b in zip(keys, keys[1:])):
            bad.append(f"linking array at {slot} not strictly sorted")
        if keys[0] != int(g.slot_keys[slot]):
            bad.append(f"slot {slot} key differs from its linking-array minimum")
        if arr.entries[0][1] != int(g.payloads[slot]):
            bad.append(f"slot {slot} payload differs from its minimum entry")
        pos = int(np.searchsorted(occ_idx, slot))
        if pos + 1 < occ_idx.size:
            nxt_key = int(g.slot_keys[occ_idx[pos + 1]])
            if keys[-1] >= nxt_key:
                bad.append(f"linking array at {slot} reaches past the next occupied key")
        count += len(arr.entries) - 1
    if count != g.key_count:
        bad.append(f"key_count {g.key_count} != stored {count}")
    return bad


@dataclass(frozen=True)
class GapBuildResult:
    index: SegmentIndex
    array: GappedArray
    plan: GapPlan
    sample: SampledPairs
    mae: float
    build_ns: int


def learn_with_gaps(dataset: Dataset, sample_spec: SampleSpec, *,
                    method: str = "optimal", epsilon: int = 64, rho: float = 0.5,
                    payloads=None) -> GapBuildResult:
    """sample -> fit -> plan gaps -> refit on gap targets -> place all keys.

    The reported MAE compares the refit index's predictions against the final
    physical slots of all n keys (linking members count at their anchor slot).
    """
    if method not in ("greedy-cone", "optimal"):
        raise ValueError("gap planning needs a piecewise-linear method")
    fitter = fit_greedy_cone if method == "greedy-cone" else fit_optimal_pla
    t0 = time.perf_counter_ns()
    sample = sample_uniform(dataset, sample_spec)
    base = fitter(sample, epsilon)
    plan = plan_gaps(base, sample, rho)
    refit = fitter((sample.keys.astype(np.float64), plan.targets), epsilon)
    array = build_gapped(refit, dataset.keys, plan=plan, payloads=payloads)
    build_ns = time.perf_counter_ns() - t0
    keys_phys, slots_phys = physical_positions(array)
    order = np.argsort(keys_phys)
    pred = refit.predict_many(keys_phys[order].astype(np.float64))
    mae = float(np.mean(np.abs(pred - slots_phys[order])))
    return GapBuildResult(index=refit, array=array, plan=plan, sample=sample,
                          mae=mae, build_ns=build_ns)


# --- serialization (GDXGAP01) ------------------------------------------------
#
# magic[8] | size u64 | key_count u64 | n_linking u64 |
# occupancy bitmap (ceil(size/8) bytes, np.packbits order) |
# slot_keys u64[size] | payloads u64[size] |
# per linking array (ascending slot): slot u64 | len u64 | (key,payload) u64 pairs

def gapped_to_bytes(g: GappedArray) -> bytes:
    buf = io.BytesIO()
    buf.write(GAPPED_MAGIC)
    buf.write(struct.pack("<QQQ", g.size, g.key_count, len(g.linking)))
    buf.write(np.packbits(g.occupied).tobytes())
    buf.write(g.slot_keys.astype("<u8").tobytes())
    buf.write(g.payloads.astype("<u8").tobytes())
    for slot in sorted(g.linking):
        entries = g.linking[slot].entries
        buf.write(struct.pack("<QQ", slot, len(entries)))
        flat = np.asarray(entries, dtype=np.uint64).reshape(-1)
        buf.write(flat.astype("<u8").tobytes())
    return buf.getvalue()


def gapped_from_bytes(blob: bytes) -> GappedArray:
    if blob[:8] != GAPPED_MAGIC:
        raise ValueError("not a gapped-array blob")
    size, key_count, n_link = struct.unpack_from("<QQQ", blob, 8)
    off = 32
    nbytes = (size + 7) // 8
    occupied = np.unpackbits(np.frombuffer(blob, dtype=np.uint8, count=nbytes,
                                           offset=off))[:size].astype(bool)
    off += nbytes
    slot_keys = np.frombuffer(blob, dtype="<u8", count=size, offset=off).copy()
    off += 8 * size
    payloads = np.frombuffer(blob, dtype="<u8", count=size, offset=off).copy()
    off += 8 * size
    linking: dict[int, LinkingArray] = {}
    for _ in range(n_link):
        slot, ln = struct.unpack_from("<QQ", blob, off)
        off += 16
        flat = np.frombuffer(blob, dtype="<u8", count=2 * ln, offset=off)
        off += 16 * ln
        linking[int(slot)] = LinkingArray([(int(flat[2 * i]), int(flat[2 * i + 1]))
                                           for i in range(ln)])
    return GappedArray(slot_keys, occupied, payloads, linking, key_count=key_count)


def save_gapped(g: GappedArray, path) -> None:
    from pathlib import Path

    Path(path).write_bytes(gapped_to_bytes(g))


def load_gapped(path) -> GappedArray:
    from pathlib import Path

    return gapped_from_bytes(Path(path).read_bytes())
