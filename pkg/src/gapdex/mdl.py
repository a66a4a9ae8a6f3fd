"""Description-length scoring and the metric suite shared by every mechanism.

The score of an index on a dataset is l_model + alpha * l_data, where the
model term prices prediction (parameter count, serialized bytes, or measured
prediction latency) and the data term prices correction (mean log2 search
cost or mean absolute error). Two non-learned baselines (whole-array binary
search and a fixed-fanout B-tree) plug into the same scoring surface.

Scoring and timing are single-threaded by contract; reports are plain values.
"""

from __future__ import annotations

import io
import json
import statistics
import struct
import time
from dataclasses import dataclass, asdict

import numpy as np

from .dataset import Dataset
from .models import (
    PredictedPosition,
    RmiIndex,
    SegmentIndex,
    index_to_bytes,
    max_abs_error,
    round_half_up,
)
from .search import correct_binary, correct_exponential

BINARY_BASELINE_MAGIC = b"GDXBIN01"
BTREE_BASELINE_MAGIC = b"GDXBTR01"

MODEL_COST_KINDS = ("param-count", "size-bytes", "predict-time-ns")
DATA_COST_KINDS = ("log2-correction", "mae")

CSV_HEADER = [
    "method", "params", "alpha", "l_model", "l_data", "mdl", "mae", "max_error",
    "build_ns", "predict_ns", "correct_ns", "overall_ns", "index_size_bytes",
    "model_count",
]


@dataclass(frozen=True)
class MdlConfig:
    alpha: float = 1.0
    model_cost_kind: str = "param-count"
    data_cost_kind: str = "log2-correction"

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if self.model_cost_kind not in MODEL_COST_KINDS:
            raise ValueError(f"unknown model cost kind {self.model_cost_kind!r}")
        if self.data_cost_kind not in DATA_COST_KINDS:
            raise ValueError(f"unknown data cost kind {self.data_cost_kind!r}")


@dataclass
class MdlReport:
    """One scored (method, parameters) cell; serializes to a stable CSV row/JSON."""

    method: str
    params: str
    alpha: float
    l_model: float
    l_data: float
    mdl: float
    mae: float
    max_error: int
    build_ns: int
    predict_ns: int
    correct_ns: int
    overall_ns: int
    index_size_bytes: int
    model_count: int

    def to_csv_row(self) -> list[str]:
        d = asdict(self)
        return [str(d[col]) for col in CSV_HEADER]

    def to_json_dict(self) -> dict:
        return {col: asdict(self)[col] for col in CSV_HEADER}

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict())


class PlainBinarySearchIndex:
    """No model at all: predict the middle and binary-search the whole array."""

    def __init__(self, n: int):
        self.n = int(n)
        self.position_bound = self.n

    @property
    def model_count(self) -> int:
        return 0

    def predict(self, key) -> PredictedPosition:
        return PredictedPosition(value=(self.n - 1) // 2, lo=0, hi=self.n - 1)

    def predict_many(self, keys) -> np.ndarray:
        keys = np.asarray(keys, dtype=np.float64)
        return np.full(keys.shape, (self.n - 1) // 2, dtype=np.int64)

    def to_bytes(self) -> bytes:
        return BINARY_BASELINE_MAGIC + struct.pack("<Q", self.n)


class FixedFanoutBTree:
    """Dense fixed-fanout tree over the sorted keys (page-scan correction).

    Internal levels store every fanout-th first key of the level below; the
    prediction step descends those levels with small binary searches and
    returns the owning page as the correction window, so lookups are always
    correct. This is a deliberately simple stand-in, not a tuned tree.
    """

    def __init__(self, keys: np.ndarray, fanout: int = 64):
        if fanout < 2:
            raise ValueError("fanout must be >= 2")
        self.fanout = int(fanout)
        keys = np.asarray(keys, dtype=np.uint64)
        self.n = int(keys.size)
        self.position_bound = self.n
        # page p covers ranks [p*fanout, min(n, (p+1)*fanout))
        self.page_firsts = keys[::fanout].astype(np.float64)
        self.levels: list[np.ndarray] = []
        level = self.page_firsts
        while level.size > self.fanout:
            level = level[::fanout]
            self.levels.append(level)
        self.levels.reverse()  # root first

    @property
    def model_count(self) -> int:
        return int(self.page_firsts.size + sum(lv.size for lv in self.levels))

    def _page_of(self, key: float) -> int:
        lo = 0
        hi = self.levels[0].size if self.levels else self.page_firsts.size
        for depth, level in enumerate(self.levels):
            i = int(np.searchsorted(level[lo:hi], key, side="right")) - 1 + lo
            i = max(0, i)
            lo = i * self.fanout
            nxt = self.levels[depth + 1] if depth + 1 < len(self.levels) else self.page_firsts
            hi = min(nxt.size, lo + self.fanout)
        i = int(np.searchsorted(self.page_firsts[lo:hi], key, side="right")) - 1 + lo
        return max(0, i)

    def predict(self, key) -> PredictedPosition:
        p = self._page_of(float(key))
        start = p * self.fanout
        end = min(self.n, start + self.fanout) - 1
        return PredictedPosition(value=(start + end) // 2, lo=start, hi=end)

    def predict_many(self, keys) -> np.ndarray:
        keys = np.asarray(keys, dtype=np.float64)
        pages = np.searchsorted(self.page_firsts, keys, side="right") - 1
        np.clip(pages, 0, self.page_firsts.size - 1, out=pages)
        starts = pages * self.fanout
        ends = np.minimum(self.n, starts + self.fanout) - 1
        return (starts + ends) // 2

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(BTREE_BASELINE_MAGIC)
        buf.write(struct.pack("<QQ", self.n, self.fanout))
        buf.write(self.page_firsts.astype("<f8").tobytes())
        for level in self.levels:
            buf.write(level.astype("<f8").tobytes())
        return buf.getvalue()


def make_baseline(kind: str, dataset: Dataset, fanout: int = 64):
    if kind == "plain-binary-search":
        return PlainBinarySearchIndex(dataset.n)
    if kind == "fixed-fanout-btree":
        return FixedFanoutBTree(dataset.keys, fanout=fanout)
    raise ValueError(f"unknown baseline kind {kind!r}")


def serialized_size(index) -> int:
    if isinstance(index, (SegmentIndex, RmiIndex)):
        return len(index_to_bytes(index))
    return len(index.to_bytes())


def data_cost(index, dataset: Dataset, kind: str = "log2-correction") -> float:
    """Mean correction cost over the dataset.

    log2-correction prices a binary search: log2(|y - yhat|) + 1 per pair,
    with exact predictions costing the single verification probe (1).
    """
    if dataset.n == 0:
        raise ValueError("empty dataset")
    errs = np.abs(index.predict_many(dataset.keys) - dataset.positions).astype(np.float64)
    if kind == "mae":
        return float(errs.mean())
    if kind == "log2-correction":
        costs = np.where(errs < 1, 1.0, np.log2(np.maximum(errs, 1.0)) + 1.0)
        return float(costs.mean())
    raise ValueError(f"unknown data cost kind {kind!r}")


def per_pair_log2_cost(errs: np.ndarray) -> np.ndarray:
    errs = np.abs(np.asarray(errs, dtype=np.float64))
    return np.where(errs < 1, 1.0, np.log2(np.maximum(errs, 1.0)) + 1.0)


def model_cost(index, kind: str = "param-count", dataset: Dataset | None = None,
               query_sample_size: int = 1000, seed: int = 0) -> float:
    """Prediction-side cost of the mechanism.

    param-count counts stored model parameters: slope, intercept and one
    directory key per segment (3 per segment); root plus 2 per leaf for the
    recursive model (untrained leaves included); every separator key for the
    tree baseline; zero for plain binary search.
    """
    if kind == "param-count":
        if isinstance(index, SegmentIndex):
            return 3.0 * index.model_count
        if isinstance(index, RmiIndex):
            return 2.0 + 2.0 * index.leaf_count
        return float(index.model_count)
    if kind == "size-bytes":
        return float(serialized_size(index))
    if kind == "predict-time-ns":
        if dataset is None:
            raise ValueError("predict-time-ns needs a dataset to sample queries from")
        timing = measure_query_times(index, dataset, query_sample_size, seed)
        return float(timing.predict_ns)
    raise ValueError(f"unknown model cost kind {kind!r}")


def sample_query_keys(dataset: Dataset, size: int, seed: int) -> np.ndarray:
    """Deterministic uniform sample (with replacement) of present keys."""
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, dataset.n, size=size)
    return dataset.keys[idx]


@dataclass(frozen=True)
class TimingResult:
    predict_ns: int
    correct_ns: int
    overall_ns: int
    predict_ns_mean: float
    correct_ns_mean: float
    overall_ns_mean: float


def measure_query_times(index, dataset: Dataset, query_sample_size: int = 1000,
                        seed: int = 0, search: str = "binary",
                        repetitions: int = 5) -> TimingResult:
    """Median per-query latency (ns) of predict-only, correct-only and
    end-to-end lookup over a seed-deterministic query set, warm cache,
    median of `repetitions` passes."""
    if query_sample_size < 1:
        raise ValueError("query_sample_size must be >= 1")
    qkeys = [int(k) for k in sample_query_keys(dataset, query_sample_size, seed)]
    search_fn = correct_binary if search == "binary" else correct_exponential
    guesses = [index.predict(k) for k in qkeys]
    predict_ns, correct_ns, overall_ns = [], [], []
    m = len(qkeys)
    for _ in range(repetitions):
        t0 = time.perf_counter_ns()
        for k in qkeys:
            index.predict(k)
        predict_ns.append((time.perf_counter_ns() - t0) / m)
        t0 = time.perf_counter_ns()
        for k, g in zip(qkeys, guesses):
            search_fn(dataset, g, k)
        correct_ns.append((time.perf_counter_ns() - t0) / m)
        t0 = time.perf_counter_ns()
        for k in qkeys:
            search_fn(dataset, index.predict(k), k)
        overall_ns.append((time.perf_counter_ns() - t0) / m)
    return TimingResult(
        predict_ns=int(statistics.median(predict_ns)),
        correct_ns=int(statistics.median(correct_ns)),
        overall_ns=int(statistics.median(overall_ns)),
        predict_ns_mean=float(statistics.fmean(predict_ns)),
        correct_ns_mean=float(statistics.fmean(correct_ns)),
        overall_ns_mean=float(statistics.fmean(overall_ns)),
    )


def mdl_score(index, dataset: Dataset, config: MdlConfig, *, method: str = "",
              params: str = "", build_ns: int = 0, query_sample_size: int = 1000,
              seed: int = 0, search: str = "binary",
              measure_timing: bool = True) -> MdlReport:
    """Populate a full report; mdl is exactly l_model + alpha * l_data."""
    l_model = model_cost(index, config.model_cost_kind, dataset=dataset,
                         query_sample_size=query_sample_size, seed=seed)
    l_data = data_cost(index, dataset, config.data_cost_kind)
    timing = (measure_query_times(index, dataset, query_sample_size, seed, search=search)
              if measure_timing else TimingResult(0, 0, 0, 0.0, 0.0, 0.0))
    return MdlReport(
        method=method or type(index).__name__,
        params=params,
        alpha=config.alpha,
        l_model=l_model,
        l_data=l_data,
        mdl=l_model + config.alpha * l_data,
        mae=data_cost(index, dataset, "mae"),
        max_error=max_abs_error(index, dataset),
        build_ns=int(build_ns),
        predict_ns=timing.predict_ns,
        correct_ns=timing.correct_ns,
        overall_ns=timing.overall_ns,
        index_size_bytes=serialized_size(index),
        model_count=index.model_count,
    )
