"""Learned index mechanisms: error-bounded piecewise-linear fits and a two-layer
recursive linear model.

Both piecewise fitters guarantee, for integer training positions and integer
error bound, that the rounded-and-clamped prediction is within the bound for
every training pair. The greedy fitter extends a segment while the shrinking
cone of admissible slopes (anchored at the segment's first point) stays
nonempty. The optimal fitter maintains the full convex region of feasible
(slope, intercept) lines via floor/ceiling convex hulls and two extreme
separator lines, closing a segment exactly when the region empties; maximal
extension of every segment yields the minimum possible segment count.

Keys are handled as float64 internally, exact for values below 2**53.
All fitted indexes are immutable and safe for concurrent reads.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass

import numpy as np
from numba import njit

from .dataset import as_pairs

SEGMENT_MAGIC = b"GDXSEG01"
RMI_MAGIC = b"GDXRMI01"

_ALGORITHMS = ("greedy-cone", "optimal")


def round_half_up(x):
    """Round to nearest integer, halves toward +inf (works on scalars and arrays)."""
    if isinstance(x, np.ndarray):
        return np.floor(x + 0.5).astype(np.int64)
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class PredictedPosition:
    """A predicted rank plus the correction-search window [lo, hi]."""

    value: int
    lo: int
    hi: int


@dataclass(frozen=True)
class LinearSegment:
    """One linear piece: predicts slope*key + intercept over [first_key, last_key].

    first_pos/last_pos are the training positions of the boundary keys; they
    anchor segment-connection patching and gap planning.
    """

    first_key: int
    last_key: int
    slope: float
    intercept: float
    first_pos: float
    last_pos: float

    def raw(self, key) -> float:
        return self.slope * float(key) + self.intercept


@njit(cache=True)
def _greedy_cone_kernel(xs, ys, eps, starts, ends, slopes, inters):
    n = xs.shape[0]
    k = 0
    anchor = 0
    lo = -np.inf
    hi = np.inf
    for t in range(1, n):
        dx = xs[t] - xs[anchor]
        dy = ys[t] - ys[anchor]
        cl = (dy - eps) / dx
        ch = (dy + eps) / dx
        nlo = lo if lo > cl else cl
        nhi = hi if hi < ch else ch
        if nlo > nhi:
            starts[k] = anchor
            ends[k] = t - 1
            if t - 1 == anchor:
                slopes[k] = 0.0
                inters[k] = ys[anchor]
            else:
                s = 0.5 * (lo + hi)
                slopes[k] = s
                inters[k] = ys[anchor] - s * xs[anchor]
            k += 1
            anchor = t
            lo = -np.inf
            hi = np.inf
        else:
            lo = nlo
            hi = nhi
    starts[k] = anchor
    ends[k] = n - 1
    if n - 1 == anchor:
        slopes[k] = 0.0
        inters[k] = ys[anchor]
    else:
        s = 0.5 * (lo + hi)
        slopes[k] = s
        inters[k] = ys[anchor] - s * xs[anchor]
    return k + 1


@njit(cache=True)
def _optimal_pla_kernel(xs, ys, eps, starts, ends, slopes, inters):
    # Streaming feasible-region maintenance. Floors are (x, y-eps), ceilings
    # (x, y+eps). A line fits the window iff it runs above every floor and
    # below every ceiling; the admissible lines are bracketed by the max-slope
    # separator (floor touch left, ceiling touch right) and the min-slope
    # separator (ceiling left, floor right). A new point is infeasible exactly
    # when its floor rises above the max separator or its ceiling falls below
    # the min separator at its x.
    n = xs.shape[0]
    fhx = np.empty(n + 2)
    fhy = np.empty(n + 2)
    chx = np.empty(n + 2)
    chy = np.empty(n + 2)
    nseg = 0
    s = 0
    while s < n:
        if s == n - 1:
            starts[nseg] = s
            ends[nseg] = s
            slopes[nseg] = 0.0
            inters[nseg] = ys[s]
            nseg += 1
            break
        x0 = xs[s]
        y0 = ys[s]
        x1 = xs[s + 1]
        y1 = ys[s + 1]
        fh_lo = 0
        fh_hi = 2
        fhx[0] = x0
        fhy[0] = y0 - eps
        fhx[1] = x1
        fhy[1] = y1 - eps
        ch_lo = 0
        ch_hi = 2
        chx[0] = x0
        chy[0] = y0 + eps
        chx[1] = x1
        chy[1] = y1 + eps
        lmax_px = x0
        lmax_py = y0 - eps
        lmax_qx = x1
        lmax_qy = y1 + eps
        lmin_px = x0
        lmin_py = y0 + eps
        lmin_qx = x1
        lmin_qy = y1 - eps
        j = s + 2
        while j < n:
            xj = xs[j]
            fl = ys[j] - eps
            ce = ys[j] + eps
            smax = (lmax_qy - lmax_py) / (lmax_qx - lmax_px)
            smin = (lmin_qy - lmin_py) / (lmin_qx - lmin_px)
            vmax = lmax_py + smax * (xj - lmax_px)
            vmin = lmin_py + smin * (xj - lmin_px)
            tol_f = 1e-9 * (1.0 + abs(vmax) + abs(fl))
            tol_c = 1e-9 * (1.0 + abs(vmin) + abs(ce))
            if fl > vmax + tol_f or ce < vmin - tol_c:
                break
            if fl > vmin:
                # Min separator rotates: through the new floor, tangent to the
                # ceiling hull (vertex maximizing the slope toward the floor).
                while ch_hi - ch_lo >= 2:
                    s_cur = (fl - chy[ch_lo]) / (xj - chx[ch_lo])
                    s_nxt = (fl - chy[ch_lo + 1]) / (xj - chx[ch_lo + 1])
                    if s_nxt >= s_cur:
                        ch_lo += 1
                    else:
                        break
                lmin_px = chx[ch_lo]
                lmin_py = chy[ch_lo]
                lmin_qx = xj
                lmin_qy = fl
            if ce < vmax:
                # Max separator rotates: through the new ceiling, tangent to
                # the floor hull (vertex minimizing the slope).
                while fh_hi - fh_lo >= 2:
                    s_cur = (ce - fhy[fh_lo]) / (xj - fhx[fh_lo])
                    s_nxt = (ce - fhy[fh_lo + 1]) / (xj - fhx[fh_lo + 1])
                    if s_nxt <= s_cur:
                        fh_lo += 1
                    else:
                        break
                lmax_px = fhx[fh_lo]
                lmax_py = fhy[fh_lo]
                lmax_qx = xj
                lmax_qy = ce
            # Extend upper hull of floors (pop non-right turns).
            while fh_hi - fh_lo >= 2:
                ox = fhx[fh_hi - 2]
                oy = fhy[fh_hi - 2]
                ax = fhx[fh_hi - 1]
                ay = fhy[fh_hi - 1]
                if (ax - ox) * (fl - oy) - (ay - oy) * (xj - ox) >= 0.0:
                    fh_hi -= 1
                else:
                    break
            fhx[fh_hi] = xj
            fhy[fh_hi] = fl
            fh_hi += 1
            # Extend lower hull of ceilings (pop non-left turns).
            while ch_hi - ch_lo >= 2:
                ox = chx[ch_hi - 2]
                oy = chy[ch_hi - 2]
                ax = chx[ch_hi - 1]
                ay = chy[ch_hi - 1]
                if (ax - ox) * (ce - oy) - (ay - oy) * (xj - ox) <= 0.0:
                    ch_hi -= 1
                else:
                    break
            chx[ch_hi] = xj
            chy[ch_hi] = ce
            ch_hi += 1
            j += 1
        end = j - 1
        smax = (lmax_qy - lmax_py) / (lmax_qx - lmax_px)
        smin = (lmin_qy - lmin_py) / (lmin_qx - lmin_px)
        a = 0.5 * (smin + smax)
        blo = -1e300
        bhi = 1e300
        for t in range(s, end + 1):
            c1 = ys[t] - eps - a * xs[t]
            c2 = ys[t] + eps - a * xs[t]
            if c1 > blo:
                blo = c1
            if c2 < bhi:
                bhi = c2
        starts[nseg] = s
        ends[nseg] = end
        slopes[nseg] = a
        inters[nseg] = 0.5 * (blo + bhi)
        nseg += 1
        s = j
    return nseg


class SegmentIndex:
    """Piecewise-linear index routed through a sorted first-key directory."""

    def __init__(self, segments, epsilon: int, algorithm: str, position_bound: int,
                 patched: bool = False):
        if algorithm not in _ALGORITHMS:
            raise ValueError(f"unknown algorithm {algorithm!r}")
        if not segments:
            raise ValueError("index needs at least one segment")
        self.segments: tuple[LinearSegment, ...] = tuple(segments)
        self.epsilon = int(epsilon)
        self.algorithm = algorithm
        self.position_bound = int(position_bound)
        self.patched = bool(patched)
        self._first_keys = np.array([s.first_key for s in self.segments], dtype=np.float64)
        self._slopes = np.array([s.slope for s in self.segments], dtype=np.float64)
        self._inters = np.array([s.intercept for s in self.segments], dtype=np.float64)
        if np.any(np.diff(self._first_keys) <= 0):
            raise ValueError("segments must have strictly ascending first keys")

    @property
    def model_count(self) -> int:
        return len(self.segments)

    def locate(self, key) -> int:
        """Index of the unique segment whose range contains `key` (clamped at ends)."""
        i = int(np.searchsorted(self._first_keys, float(key), side="right")) - 1
        return max(0, i)

    def predict(self, key) -> PredictedPosition:
        seg = self.segments[self.locate(key)]
        hi_bound = self.position_bound - 1
        value = min(max(round_half_up(seg.raw(key)), 0), hi_bound)
        return PredictedPosition(
            value=value,
            lo=max(0, value - self.epsilon),
            hi=min(hi_bound, value + self.epsilon),
        )

    def predict_many(self, keys) -> np.ndarray:
        keys = np.asarray(keys, dtype=np.float64)
        idx = np.searchsorted(self._first_keys, keys, side="right") - 1
        np.clip(idx, 0, len(self.segments) - 1, out=idx)
        raw = self._slopes[idx] * keys + self._inters[idx]
        return np.clip(round_half_up(raw), 0, self.position_bound - 1)

    def __repr__(self) -> str:
        return (f"SegmentIndex(algorithm={self.algorithm!r}, segments={self.model_count}, "
                f"epsilon={self.epsilon}, patched={self.patched})")


def _segments_from_kernel(keys_f, pos_f, count, starts, ends, slopes, inters):
    segs = []
    for i in range(count):
        a, b = int(starts[i]), int(ends[i])
        segs.append(LinearSegment(
            first_key=int(keys_f[a]),
            last_key=int(keys_f[b]),
            slope=float(slopes[i]),
            intercept=float(inters[i]),
            first_pos=float(pos_f[a]),
            last_pos=float(pos_f[b]),
        ))
    return segs


def _run_fitter(kernel, data, epsilon: int, algorithm: str) -> SegmentIndex:
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    keys_f, pos_f = as_pairs(data)
    n = keys_f.size
    starts = np.empty(n, dtype=np.int64)
    ends = np.empty(n, dtype=np.int64)
    slopes = np.empty(n, dtype=np.float64)
    inters = np.empty(n, dtype=np.float64)
    count = kernel(keys_f, pos_f, float(epsilon), starts, ends, slopes, inters)
    segs = _segments_from_kernel(keys_f, pos_f, count, starts, ends, slopes, inters)
    bound = int(math.ceil(pos_f[-1])) + 1
    return SegmentIndex(segs, epsilon=epsilon, algorithm=algorithm, position_bound=bound)


def fit_greedy_cone(data, epsilon: int) -> SegmentIndex:
    """Greedy shrinking-cone segmentation: a new segment starts exactly when the
    intersection of per-point slope intervals (anchored at the segment's first
    point) becomes empty."""
    return _run_fitter(_greedy_cone_kernel, data, epsilon, "greedy-cone")


def fit_optimal_pla(data, epsilon: int) -> SegmentIndex:
    """Minimum-segment-count error-bounded piecewise-linear fit (streaming
    convex-region maintenance; verified against an exhaustive DP oracle in tests)."""
    return _run_fitter(_optimal_pla_kernel, data, epsilon, "optimal")


class RmiIndex:
    """Two-layer recursive model: a linear root routes keys to linear leaves.

    Leaf ids are assigned by an equal-width partition of training ranks; the
    root is a least-squares line over (key, rank * leaf_count / n) and routing
    uses clamp(round(root(key))). Each leaf is a least-squares line over the
    pairs the root routes to it, with the extremes of (prediction - position)
    recorded per leaf. Leaves that receive no pairs are flagged untrained.
    """

    def __init__(self, root_slope, root_intercept, leaf_slopes, leaf_intercepts,
                 max_pos_err, min_neg_err, trained, position_bound: int):
        self.root_slope = float(root_slope)
        self.root_intercept = float(root_intercept)
        self.leaf_slopes = np.asarray(leaf_slopes, dtype=np.float64)
        self.leaf_intercepts = np.asarray(leaf_intercepts, dtype=np.float64)
        self.max_pos_err = np.asarray(max_pos_err, dtype=np.float64)
        self.min_neg_err = np.asarray(min_neg_err, dtype=np.float64)
        self.trained = np.asarray(trained, dtype=bool)
        self.position_bound = int(position_bound)
        arrays = (self.leaf_intercepts, self.max_pos_err, self.min_neg_err, self.trained)
        if any(a.shape != self.leaf_slopes.shape for a in arrays):
            raise ValueError("leaf arrays must have equal length")

    @property
    def leaf_count(self) -> int:
        return int(self.leaf_slopes.size)

    @property
    def model_count(self) -> int:
        return self.leaf_count

    def route(self, key) -> int:
        leaf = round_half_up(self.root_slope * float(key) + self.root_intercept)
        return min(max(leaf, 0), self.leaf_count - 1)

    def predict(self, key) -> PredictedPosition:
        leaf = self.route(key)
        raw = self.leaf_slopes[leaf] * float(key) + self.leaf_intercepts[leaf]
        hi_bound = self.position_bound - 1
        value = min(max(round_half_up(raw), 0), hi_bound)
        # min_neg <= (prediction - position) <= max_pos, so the true position
        # lies in [value - max_pos, value - min_neg].
        lo = max(0, value - int(math.ceil(self.max_pos_err[leaf])))
        hi = min(hi_bound, value - int(math.floor(self.min_neg_err[leaf])))
        return PredictedPosition(value=value, lo=lo, hi=max(lo, hi))

    def predict_many(self, keys) -> np.ndarray:
        keys = np.asarray(keys, dtype=np.float64)
        leaves = round_half_up(self.root_slope * keys + self.root_intercept)
        np.clip(leaves, 0, self.leaf_count - 1, out=leaves)
        raw = self.leaf_slopes[leaves] * keys + self.leaf_intercepts[leaves]
        return np.clip(round_half_up(raw), 0, self.position_bound - 1)

    def __repr__(self) -> str:
        untrained = int((~self.trained).sum())
        return f"RmiIndex(leaves={self.leaf_count}, untrained={untrained})"


def _ols(keys: np.ndarray, pos: np.ndarray) -> tuple[float, float]:
    # Centered ordinary least squares; well conditioned for large key values.
    if keys.size == 1:
        return 0.0, float(pos[0])
    kx = keys.mean()
    ky = pos.mean()
    dx = keys - kx
    sxx = float(np.dot(dx, dx))
    if sxx == 0.0:
        return 0.0, float(ky)
    slope = float(np.dot(dx, pos - ky)) / sxx
    return slope, float(ky - slope * kx)


def fit_rmi(data, leaf_count: int) -> RmiIndex:
    if leaf_count < 1:
        raise ValueError("leaf_count must be >= 1")
    keys_f, pos_f = as_pairs(data)
    n = keys_f.size
    bound = int(math.ceil(pos_f[-1])) + 1
    targets = pos_f * (leaf_count / n)
    root_slope, root_intercept = _ols(keys_f, targets)
    leaves = round_half_up(root_slope * keys_f + root_intercept)
    np.clip(leaves, 0, leaf_count - 1, out=leaves)
    slopes = np.zeros(leaf_count)
    inters = np.zeros(leaf_count)
    max_pos = np.zeros(leaf_count)
    min_neg = np.zeros(leaf_count)
    trained = np.zeros(leaf_count, dtype=bool)
    # Root slope is positive for monotone pairs, so routed ids are sorted.
    bounds = np.searchsorted(leaves, np.arange(leaf_count + 1))
    for leaf in range(leaf_count):
        a, b = int(bounds[leaf]), int(bounds[leaf + 1])
        if a == b:
            continue
        slopes[leaf], inters[leaf] = _ols(keys_f[a:b], pos_f[a:b])
        pred = np.clip(round_half_up(slopes[leaf] * keys_f[a:b] + inters[leaf]), 0, bound - 1)
        err = pred - pos_f[a:b]
        max_pos[leaf] = max(err.max(), 0.0)
        min_neg[leaf] = min(err.min(), 0.0)
        trained[leaf] = True
    if not trained.any():
        raise ValueError("no leaf received training pairs")
    return RmiIndex(root_slope, root_intercept, slopes, inters, max_pos, min_neg,
                    trained, position_bound=bound)


def max_abs_error(index, data) -> int:
    """Largest |prediction - position| over the pair sequence (ceiling for
    fractional positions)."""
    keys_f, pos_f = as_pairs(data)
    pred = index.predict_many(keys_f)
    return int(math.ceil(float(np.max(np.abs(pred - pos_f)))))


# --- serialization ----------------------------------------------------------
#
# SegmentIndex layout (GDXSEG01, little endian):
#   magic[8] | algorithm u8 | patched u8 | pad[6] | epsilon i64 |
#   position_bound u64 | K u64 | first_keys u64[K] | last_keys u64[K] |
#   slopes f64[K] | intercepts f64[K] | first_pos f64[K] | last_pos f64[K]
#
# RmiIndex layout (GDXRMI01):
#   magic[8] | L u64 | position_bound u64 | root_slope f64 | root_intercept f64 |
#   leaf_slopes f64[L] | leaf_intercepts f64[L] | max_pos f64[L] |
#   min_neg f64[L] | trained u8[L]

def index_to_bytes(index) -> bytes:
    buf = io.BytesIO()
    if isinstance(index, SegmentIndex):
        buf.write(SEGMENT_MAGIC)
        algo = _ALGORITHMS.index(index.algorithm)
        buf.write(struct.pack("<BB6x", algo, int(index.patched)))
        buf.write(struct.pack("<qQQ", index.epsilon, index.position_bound, index.model_count))
        segs = index.segments
        for field, dtype in (
            ([s.first_key for s in segs], "<u8"),
            ([s.last_key for s in segs], "<u8"),
            ([s.slope for s in segs], "<f8"),
            ([s.intercept for s in segs], "<f8"),
            ([s.first_pos for s in segs], "<f8"),
            ([s.last_pos for s in segs], "<f8"),
        ):
            buf.write(np.asarray(field, dtype=dtype).tobytes())
        return buf.getvalue()
    if isinstance(index, RmiIndex):
        buf.write(RMI_MAGIC)
        buf.write(struct.pack("<QQdd", index.leaf_count, index.position_bound,
                              index.root_slope, index.root_intercept))
        buf.write(index.leaf_slopes.astype("<f8").tobytes())
        buf.write(index.leaf_intercepts.astype("<f8").tobytes())
        buf.write(index.max_pos_err.astype("<f8").tobytes())
        buf.write(index.min_neg_err.astype("<f8").tobytes())
        buf.write(index.trained.astype("<u1").tobytes())
        return buf.getvalue()
    raise TypeError(f"cannot serialize {type(index).__name__}")


def index_from_bytes(blob: bytes):
    magic = blob[:8]
    if magic == SEGMENT_MAGIC:
        algo, patched = struct.unpack_from("<BB6x", blob, 8)
        epsilon, bound, k = struct.unpack_from("<qQQ", blob, 16)
        off = 40
        fields = []
        for dtype in ("<u8", "<u8", "<f8", "<f8", "<f8", "<f8"):
            fields.append(np.frombuffer(blob, dtype=dtype, count=k, offset=off))
            off += 8 * k
        fk, lk, sl, it, fp, lp = fields
        segs = [LinearSegment(int(fk[i]), int(lk[i]), float(sl[i]), float(it[i]),
                              float(fp[i]), float(lp[i])) for i in range(k)]
        return SegmentIndex(segs, epsilon=epsilon, algorithm=_ALGORITHMS[algo],
                            position_bound=bound, patched=bool(patched))
    if magic == RMI_MAGIC:
        leaf_count, bound, root_slope, root_intercept = struct.unpack_from("<QQdd", blob, 8)
        off = 8 + 8 + 8 + 8 + 8
        arrays = []
        for dtype in ("<f8", "<f8", "<f8", "<f8"):
            arrays.append(np.frombuffer(blob, dtype=dtype, count=leaf_count, offset=off))
            off += 8 * leaf_count
        trained = np.frombuffer(blob, dtype="<u1", count=leaf_count, offset=off).astype(bool)
        return RmiIndex(root_slope, root_intercept, *arrays, trained, position_bound=bound)
    raise ValueError(f"unknown index magic {magic!r}")


def save_index(index, path) -> None:
    from pathlib import Path

    Path(path).write_bytes(index_to_bytes(index))


def load_index(path):
    from pathlib import Path

    return index_from_bytes(Path(path).read_bytes())
