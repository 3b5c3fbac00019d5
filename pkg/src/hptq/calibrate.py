"""Power-of-two threshold selection.

The no-clipping threshold is the smallest power of two covering the observed
max absolute value. The constrained search evaluates that threshold and its
`n` successive halvings, keeping the first strict improvement, so ties break
toward the larger threshold. Activation error is estimated from histograms;
weight error is computed exactly on the weight values, per output channel.
"""

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import PipelineError
from .quantizers import MIN_EXPONENT, QuantSpec, quantize
from .stats import Histogram


class ErrorMeasure(str, Enum):
    NC = "nc"  # no search, keep the no-clipping threshold
    MSE = "mse"
    MAE = "mae"
    KL = "kl"


@dataclass(frozen=True)
class ThresholdResult:
    exponent: int
    error: float
    nc_exponent: int
    nc_error: float
    evaluations: int

    @property
    def threshold(self):
        return math.ldexp(1.0, self.exponent)


def no_clipping_exponent(max_abs: float) -> int:
    """Smallest M with 2**M >= max_abs; MIN_EXPONENT for all-zero data."""
    if max_abs < 0:
        raise ValueError(f"max_abs must be non-negative, got {max_abs}")
    if max_abs == 0:
        return MIN_EXPONENT
    frac, exp = math.frexp(max_abs)  # max_abs = frac * 2**exp, frac in [0.5, 1)
    return exp - 1 if frac == 0.5 else exp


def histogram_error(hist: Histogram, exponent: int, bits: int, signed: bool, measure: ErrorMeasure) -> float:
    """Count-weighted quantization error of the bin centres."""
    total = hist.total
    if total <= 0:
        raise PipelineError("histogram has no mass")
    spec = QuantSpec(bits=bits, signed=signed, exponent=exponent)
    centers = hist.centers
    q = quantize(centers, spec)
    if measure == ErrorMeasure.MSE:
        return float((hist.counts * (q - centers) ** 2).sum() / total)
    if measure == ErrorMeasure.MAE:
        return float((hist.counts * np.abs(q - centers)).sum() / total)
    if measure == ErrorMeasure.KL:
        return _kl_divergence(hist.counts, q, total)
    raise ValueError(f"measure {measure} has no histogram error")


def _kl_divergence(counts, quantized_centers, total, eps=1e-10):
    """KL between the source distribution and its quantizer-regrouped version.

    Bins mapping to the same quantized level share that level's total mass
    uniformly; both distributions are smoothed by eps and renormalized.
    """
    levels, inverse = np.unique(quantized_centers, return_inverse=True)
    group_mass = np.zeros(len(levels))
    np.add.at(group_mass, inverse, counts)
    group_size = np.bincount(inverse, minlength=len(levels))
    q = group_mass[inverse] / group_size[inverse]
    p = counts / total
    q = q / q.sum()
    p = p + eps
    q = q + eps
    p = p / p.sum()
    q = q / q.sum()
    return float(np.sum(p * np.log(p / q)))


def select_threshold(error_fn, nc_exponent: int, iterations: int) -> ThresholdResult:
    """Evaluate nc_exponent and `iterations` halvings; keep the strict minimum."""
    if iterations < 0:
        raise ValueError(f"iterations must be >= 0, got {iterations}")
    best_exp = nc_exponent
    best_err = math.inf
    nc_error = None
    evals = 0
    for i in range(iterations + 1):
        exp = nc_exponent - i
        err = float(error_fn(exp))
        evals += 1
        if nc_error is None:
            nc_error = err
        if err < best_err:
            best_exp, best_err = exp, err
    return ThresholdResult(
        exponent=best_exp, error=best_err, nc_exponent=nc_exponent, nc_error=nc_error, evaluations=evals
    )


def select_activation_threshold(hist: Histogram, max_abs: float, bits: int, signed: bool,
                                measure: ErrorMeasure, iterations: int) -> ThresholdResult:
    """Histogram-estimated search for a per-tensor activation threshold."""
    nc = no_clipping_exponent(max_abs)
    if measure == ErrorMeasure.NC or max_abs == 0:
        return ThresholdResult(exponent=nc, error=math.nan, nc_exponent=nc, nc_error=math.nan, evaluations=0)
    return select_threshold(
        lambda exp: histogram_error(hist, exp, bits, signed, measure), nc, iterations
    )


def _exact_weight_error(values, exponent, bits, measure):
    spec = QuantSpec(bits=bits, signed=True, exponent=exponent)
    q = quantize(values, spec)
    if measure == ErrorMeasure.MSE:
        return float(np.mean((q - values) ** 2))
    if measure == ErrorMeasure.MAE:
        return float(np.mean(np.abs(q - values)))
    if measure == ErrorMeasure.KL:
        # no exact sample KL; estimate from a fine histogram of the slice
        lo, hi = float(values.min()), float(values.max())
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
        counts, edges = np.histogram(values, bins=1024, range=(lo, hi))
        hist = Histogram(edges=edges, counts=counts.astype(np.float64))
        return histogram_error(hist, exponent, bits, True, ErrorMeasure.KL)
    raise ValueError(f"measure {measure} has no weight error")


def select_weight_threshold(values, bits: int, iterations: int, measure: ErrorMeasure) -> ThresholdResult:
    """Exact search over one weight slice (signed quantizer always)."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    max_abs = float(np.max(np.abs(values))) if values.size else 0.0
    nc = no_clipping_exponent(max_abs)
    if measure == ErrorMeasure.NC or max_abs == 0:
        err = 0.0 if max_abs == 0 else math.nan
        return ThresholdResult(exponent=nc, error=err, nc_exponent=nc, nc_error=err, evaluations=0)
    return select_threshold(
        lambda exp: _exact_weight_error(values, exp, bits, measure), nc, iterations
    )


def select_weight_thresholds(weights, channel_axis: int, bits: int, iterations: int,
                             measure: ErrorMeasure, per_channel: bool = True):
    """Threshold exponent per output channel of a weight tensor.

    With per_channel=False a single threshold is searched over the whole
    tensor and repeated for every channel.
    """
    weights = np.asarray(weights, dtype=np.float64)
    n_channels = weights.shape[channel_axis]
    if not per_channel:
        result = select_weight_threshold(weights.reshape(-1), bits, iterations, measure)
        return np.full(n_channels, result.exponent, dtype=np.int64), [result] * n_channels
    moved = np.moveaxis(weights, channel_axis, -1).reshape(-1, n_channels)
    results = [select_weight_threshold(moved[:, k], bits, iterations, measure) for k in range(n_channels)]
    return np.array([r.exponent for r in results], dtype=np.int64), results
