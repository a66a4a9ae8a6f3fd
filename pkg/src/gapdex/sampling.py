"""Sampling-accelerated index construction and its coverage patches.

A uniform sample (always anchored by the global first and last keys) carries
global ranks, so an index fit on it predicts full-array positions. Piecewise
indexes are then made gapless by connecting adjacent segments through their
boundary sample points; recursive-model indexes copy parameters into
untrained leaves from the nearest trained leaf. Because sampling can break
error bounds on unsampled keys, evaluation of sampled indexes must correct
with exponential search.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import numpy as np

from .dataset import Dataset
from .mdl import per_pair_log2_cost
from .models import (
    LinearSegment,
    RmiIndex,
    SegmentIndex,
    fit_greedy_cone,
    fit_optimal_pla,
    fit_rmi,
    max_abs_error,
)

LEARNED_METHODS = ("greedy-cone", "optimal", "rmi")


@dataclass(frozen=True)
class SampleSpec:
    rate: float
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.rate <= 1:
            raise ValueError("rate must be in (0, 1]")


@dataclass(frozen=True)
class SampledPairs:
    """Ascending (key, global rank) pairs drawn from a larger dataset."""

    keys: np.ndarray
    positions: np.ndarray
    source_n: int

    @property
    def n(self) -> int:
        return int(self.keys.size)


def sample_uniform(dataset: Dataset, spec: SampleSpec) -> SampledPairs:
    """max(2, round(rate*n)) pairs without replacement, always including the
    first and last ranks (patching anchors); deterministic per seed."""
    n = dataset.n
    if n < 2:
        raise ValueError("dataset too small to sample (need n >= 2)")
    m = max(2, int(math.floor(spec.rate * n + 0.5)))
    m = min(m, n)
    rng = np.random.default_rng(spec.seed)
    if m == n:
        ranks = np.arange(n, dtype=np.int64)
    else:
        inner = rng.choice(n - 2, size=m - 2, replace=False).astype(np.int64) + 1
        ranks = np.concatenate(([0], inner, [n - 1]))
        ranks.sort()
    return SampledPairs(keys=dataset.keys[ranks], positions=ranks, source_n=n)


def patch_connect_segments(index: SegmentIndex,
                           full_key_range: tuple[int, int]) -> SegmentIndex:
    """Make key coverage gapless: between consecutive segments, insert a
    connector line through the last sample point of the left segment and the
    first sample point of the right segment."""
    lo_key, hi_key = int(full_key_range[0]), int(full_key_range[1])
    segs = list(index.segments)
    out: list[LinearSegment] = []
    for left, right in zip(segs, segs[1:]):
        out.append(left)
        if right.first_key - left.last_key > 1:
            dx = right.first_key - left.last_key
            slope = (right.first_pos - left.last_pos) / dx
            intercept = left.last_pos - slope * left.last_key
            out.append(LinearSegment(
                first_key=left.last_key + 1,
                last_key=right.first_key - 1,
                slope=slope,
                intercept=intercept,
                first_pos=left.last_pos,
                last_pos=right.first_pos,
            ))
    out.append(segs[-1])
    out[0] = replace(out[0], first_key=min(lo_key, out[0].first_key))
    out[-1] = replace(out[-1], last_key=max(hi_key, out[-1].last_key))
    return SegmentIndex(out, epsilon=index.epsilon, algorithm=index.algorithm,
                        position_bound=index.position_bound, patched=True)


def patch_rmi_nearest_seg(index: RmiIndex) -> RmiIndex:
    """Copy parameters and error extremes into each untrained leaf from the
    nearest trained leaf by id distance (ties toward the lower id)."""
    trained_ids = np.nonzero(index.trained)[0]
    if trained_ids.size == 0:
        raise ValueError("all leaves untrained")
    if trained_ids.size == index.leaf_count:
        return index
    ids = np.arange(index.leaf_count)
    right = np.searchsorted(trained_ids, ids)
    left = np.clip(right - 1, 0, trained_ids.size - 1)
    right = np.clip(right, 0, trained_ids.size - 1)
    dist_left = np.abs(ids - trained_ids[left])
    dist_right = np.abs(trained_ids[right] - ids)
    donor = np.where(dist_left <= dist_right, trained_ids[left], trained_ids[right])
    donor[index.trained] = ids[index.trained]
    return RmiIndex(
        index.root_slope, index.root_intercept,
        index.leaf_slopes[donor], index.leaf_intercepts[donor],
        index.max_pos_err[donor], index.min_neg_err[donor],
        np.ones(index.leaf_count, dtype=bool),
        position_bound=index.position_bound,
    )


def guideline_sample_size(alpha: float, max_error: int, c: float = 1.0,
                          floor: int = 64) -> int:
    """Asymptotic sample-size guideline: ceil(c * alpha^2 * log2(E)^2), floored.

    c hides the constants of the asymptotic bound and is a calibration knob.
    """
    if max_error < 1:
        raise ValueError("max_error must be >= 1")
    if c <= 0:
        raise ValueError("c must be > 0")
    raw = c * alpha * alpha * math.log2(max_error) ** 2
    return max(floor, int(math.ceil(raw)))


@dataclass(frozen=True)
class SampledFitResult:
    index: SegmentIndex | RmiIndex
    sample: SampledPairs
    build_ns: int


def learn_with_sampling(dataset: Dataset, spec: SampleSpec, method: str,
                        epsilon: int = 64, leaf_count: int = 64) -> SampledFitResult:
    """sample -> fit -> patch, timing the whole pipeline.

    The result may violate the error bound on unsampled keys, so evaluate it
    with exponential-search correction.
    """
    if method not in LEARNED_METHODS:
        raise ValueError(f"unknown method {method!r}")
    t0 = time.perf_counter_ns()
    sample = sample_uniform(dataset, spec)
    if method == "rmi":
        index = patch_rmi_nearest_seg(fit_rmi(sample, leaf_count))
    else:
        fitter = fit_greedy_cone if method == "greedy-cone" else fit_optimal_pla
        key_range = (int(dataset.keys[0]), int(dataset.keys[-1]))
        index = patch_connect_segments(fitter(sample, epsilon), key_range)
    build_ns = time.perf_counter_ns() - t0
    return SampledFitResult(index=index, sample=sample, build_ns=build_ns)


@dataclass(frozen=True)
class BoundCheckReport:
    trials: int
    delta: float
    violations: int
    bound_values: tuple[float, ...]
    deviations: tuple[float, ...]


def check_hoeffding_bound(dataset: Dataset, index, n_s: int, delta: float,
                          trials: int, seed: int = 0) -> BoundCheckReport:
    """Monte-Carlo check of the sampled-loss concentration bound.

    Each trial draws a plain uniform n_s-subset (without replacement, no
    anchor forcing: the draw estimates the loss, it does not feed patching)
    and compares |L(sample) - L(full)| under the log2-correction loss against
    (log2 E / sqrt(2 n_s)) * sqrt(ln(2/delta)), where E is the index's maximum
    absolute error on the full dataset. The loss-range factor uses log2 to
    match the loss; the concentration factor keeps the natural log of the
    underlying exponential inequality. Without-replacement draws match the
    benchmarking procedure and only tighten concentration versus independent
    draws.
    """
    if not 1 <= n_s <= dataset.n:
        raise ValueError("need 1 <= n_s <= n")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if not 0 < delta < 1:
        raise ValueError("delta must be in (0, 1)")
    errs = np.abs(index.predict_many(dataset.keys) - dataset.positions)
    costs = per_pair_log2_cost(errs)
    full_loss = float(costs.mean())
    e_max = max(1, max_abs_error(index, dataset))
    bound = (math.log2(e_max) / math.sqrt(2 * n_s)) * math.sqrt(math.log(2 / delta))
    seeds = np.random.SeedSequence(seed).spawn(trials)
    deviations = []
    violations = 0
    for ss in seeds:
        rng = np.random.default_rng(ss)
        pick = rng.choice(dataset.n, size=n_s, replace=False)
        dev = abs(float(costs[pick].mean()) - full_loss)
        deviations.append(dev)
        if dev > bound:
            violations += 1
    return BoundCheckReport(
        trials=trials,
        delta=delta,
        violations=violations,
        bound_values=tuple([bound] * trials),
        deviations=tuple(deviations),
    )
