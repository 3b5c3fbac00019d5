"""Activation statistics over a representative dataset.

Collection is two-pass: the first pass finds exact per-tensor ranges and
per-channel min/max/mean (streaming sums, not histogram-derived), the second
fills fixed-edge histograms over the observed [min, max]. Outlier removal
zeroes histogram bins far from the count-weighted mean; it never touches the
per-channel statistics.
"""

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from .engine import run_float
from .errors import StatsError
from .tensor import CHANNEL_AXIS, channel_reduce


@dataclass(frozen=True)
class Histogram:
    """Fixed-edge histogram: n+1 ascending edges, n non-negative counts."""

    edges: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        if len(self.edges) != len(self.counts) + 1:
            raise StatsError(f"{len(self.edges)} edges for {len(self.counts)} bins")
        if np.any(np.diff(self.edges) <= 0):
            raise StatsError("histogram edges must be strictly ascending")
        if np.any(self.counts < 0):
            raise StatsError("histogram counts must be non-negative")
        self.edges.setflags(write=False)
        self.counts.setflags(write=False)

    @property
    def centers(self):
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def total(self):
        return float(self.counts.sum())


@dataclass(frozen=True)
class TensorStats:
    histogram: Histogram
    per_channel_min: np.ndarray
    per_channel_max: np.ndarray
    per_channel_mean: np.ndarray
    tensor_min: float
    tensor_max: float

    @property
    def tensor_max_abs(self):
        return max(abs(self.tensor_min), abs(self.tensor_max))

    @property
    def per_channel_max_abs(self):
        return np.maximum(np.abs(self.per_channel_min), np.abs(self.per_channel_max))


@dataclass
class StatsStore:
    """Per-tensor statistics for every activation tensor of a graph."""

    stats: dict
    outlier_removed: dict = field(default_factory=dict)

    def __getitem__(self, tensor_id) -> TensorStats:
        if tensor_id not in self.stats:
            raise StatsError(f"no statistics for tensor {tensor_id!r}")
        return self.stats[tensor_id]

    def __contains__(self, tensor_id):
        return tensor_id in self.stats

    def ids(self):
        return sorted(self.stats)

    def with_outlier_removal(self, z_threshold):
        """New store whose histograms had far-out bins zeroed."""
        new = {}
        for tid, ts in self.stats.items():
            new[tid] = replace(ts, histogram=remove_outliers(ts.histogram, z_threshold))
        return StatsStore(stats=new, outlier_removed={tid: True for tid in new})


def collect_statistics(graph, calib, n_bins=2048) -> StatsStore:
    """Run the float graph over every sample and summarize each tensor."""
    if calib.n_samples < 1:
        raise StatsError("calibration set empty")
    names = graph.tensor_names()

    mins, maxs = {}, {}
    ch_min, ch_max, ch_sum, ch_count = {}, {}, {}, {}
    for sample in calib.samples:
        trace = run_float(graph, sample)
        for name in names:
            t = trace.tensors[name]
            if not np.all(np.isfinite(t.data)):
                raise StatsError(f"non-finite activation in tensor {name!r}")
            mins[name] = min(mins.get(name, np.inf), float(t.data.min()))
            maxs[name] = max(maxs.get(name, -np.inf), float(t.data.max()))
            cmin = channel_reduce(t, "min")
            cmax = channel_reduce(t, "max")
            if name in ch_min:
                ch_min[name] = np.minimum(ch_min[name], cmin)
                ch_max[name] = np.maximum(ch_max[name], cmax)
            else:
                ch_min[name], ch_max[name] = cmin, cmax
            moved = np.moveaxis(t.array, CHANNEL_AXIS[t.layout], -1).reshape(-1, t.channels)
            ch_sum[name] = ch_sum.get(name, 0.0) + moved.sum(axis=0)
            ch_count[name] = ch_count.get(name, 0) + moved.shape[0]

    hist_counts = {name: np.zeros(n_bins) for name in names}
    edges = {name: _edges(mins[name], maxs[name], n_bins) for name in names}
    for sample in calib.samples:
        trace = run_float(graph, sample)
        for name in names:
            counts, _ = np.histogram(trace.tensors[name].data, bins=edges[name])
            hist_counts[name] += counts

    stats = {}
    for name in names:
        stats[name] = TensorStats(
            histogram=Histogram(edges=edges[name], counts=hist_counts[name]),
            per_channel_min=ch_min[name],
            per_channel_max=ch_max[name],
            per_channel_mean=ch_sum[name] / ch_count[name],
            tensor_min=mins[name],
            tensor_max=maxs[name],
        )
    return StatsStore(stats=stats, outlier_removed={name: False for name in names})


def _edges(lo, hi, n_bins):
    if lo == hi:
        # constant tensor: unit-wide range centred on the value
        return np.linspace(lo - 0.5, hi + 0.5, n_bins + 1)
    # widen ranges too narrow for n_bins representable edge values
    min_span = 4.0 * n_bins * np.spacing(max(abs(lo), abs(hi), 1.0))
    if hi - lo < min_span:
        center = 0.5 * (lo + hi)
        return np.linspace(center - 0.5 * min_span, center + 0.5 * min_span, n_bins + 1)
    return np.linspace(lo, hi, n_bins + 1)


def remove_outliers(hist: Histogram, z_threshold: float) -> Histogram:
    """Zero bins whose centre is more than z_threshold weighted sigmas from the
    weighted mean. A zero-variance histogram is returned unchanged."""
    if z_threshold <= 0:
        raise StatsError(f"z-score threshold must be positive, got {z_threshold}")
    total = hist.total
    if total <= 0:
        raise StatsError("histogram has no mass")
    centers = hist.centers
    mean = float((centers * hist.counts).sum() / total)
    var = float((hist.counts * (centers - mean) ** 2).sum() / total)
    if var == 0.0:
        return hist
    z = np.abs(centers - mean) / np.sqrt(var)
    counts = np.where(z > z_threshold, 0.0, hist.counts)
    return Histogram(edges=hist.edges.copy(), counts=counts)


def stats_csv(store: StatsStore) -> str:
    """Per-channel statistics as CSV: tensor, channel, min, max, mean."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["tensor", "channel", "min", "max", "mean"])
    for tid in store.ids():
        ts = store[tid]
        for c in range(len(ts.per_channel_min)):
            writer.writerow(
                [
                    tid,
                    c,
                    repr(float(ts.per_channel_min[c])),
                    repr(float(ts.per_channel_max[c])),
                    repr(float(ts.per_channel_mean[c])),
                ]
            )
    return buf.getvalue()
