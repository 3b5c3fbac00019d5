import math

import numpy as np
import pytest

from hptq.calibrate import (
    ErrorMeasure,
    histogram_error,
    no_clipping_exponent,
    select_activation_threshold,
    select_threshold,
    select_weight_threshold,
    select_weight_thresholds,
)
from hptq.quantizers import MIN_EXPONENT, QuantSpec, quantize
from hptq.stats import Histogram


def hist_of(data, bins=2048):
    data = np.asarray(data, dtype=np.float64)
    lo, hi = float(data.min()), float(data.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(data, bins=bins, range=(lo, hi))
    return Histogram(edges=edges, counts=counts.astype(np.float64))


def raw_mse(data, exponent, bits, signed):
    spec = QuantSpec(bits=bits, signed=signed, exponent=exponent)
    return float(np.mean((quantize(data, spec) - data) ** 2))


class TestNoClippingExponent:
    @pytest.mark.parametrize("max_abs,expected", [(4.2, 3), (1.0, 0), (0.3, -1), (0.5, -1), (8.0, 3), (8.1, 4)])
    def test_examples(self, max_abs, expected):
        assert no_clipping_exponent(max_abs) == expected

    def test_result_covers_value(self):
        rng = np.random.default_rng(0)
        for m in rng.uniform(1e-6, 1e6, size=500):
            e = no_clipping_exponent(float(m))
            assert 2.0**e >= m
            assert 2.0 ** (e - 1) < m

    def test_zero_gets_minimum_exponent(self):
        assert no_clipping_exponent(0.0) == MIN_EXPONENT

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            no_clipping_exponent(-1.0)


class TestHistogramError:
    def test_zero_is_fixed_point(self):
        """All mass in a bin centred at zero: zero error for every threshold."""
        h = Histogram(edges=np.array([-0.5, 0.5]), counts=np.array([100.0]))
        for exponent in (-3, 0, 4):
            assert histogram_error(h, exponent, 8, True, ErrorMeasure.MSE) == 0.0

    def test_on_grid_centers_have_zero_mse(self):
        """Mass at +-0.5 with t=1, 8 bits signed: both centres are grid points."""
        edges = np.array([-0.5625, -0.4375, 0.4375, 0.5625])
        counts = np.array([10.0, 0.0, 10.0])
        h = Histogram(edges=edges, counts=counts)
        assert histogram_error(h, 0, 8, True, ErrorMeasure.MSE) == 0.0

    @pytest.mark.parametrize("bits", [2, 3, 4, 5])
    @pytest.mark.parametrize("dist", ["normal", "uniform", "laplace"])
    def test_tracks_raw_mse_within_binning_tolerance(self, bits, dist):
        """2048-bin estimate vs exact sample MSE, 1e-3 relative.

        The bin-centre estimator has a systematic bias of (bin/step)^2
        relative to the rounding noise, so the tolerance constrains
        bits <= 5 at this bin count.
        """
        rng = np.random.default_rng(hash((bits, dist)) % 2**32)
        data = {
            "normal": rng.normal(scale=1.3, size=40000),
            "uniform": rng.uniform(-2.0, 2.0, size=40000),
            "laplace": rng.laplace(scale=0.8, size=40000),
        }[dist]
        h = hist_of(data)
        nc = no_clipping_exponent(float(np.max(np.abs(data))))
        for exponent in (nc, nc - 2):
            estimated = histogram_error(h, exponent, bits, True, ErrorMeasure.MSE)
            exact = raw_mse(data, exponent, bits, True)
            assert estimated == pytest.approx(exact, rel=1e-3)

    def test_mae_weighted_by_counts(self):
        edges = np.array([-1.0, 0.0, 1.0])
        counts = np.array([1.0, 3.0])
        h = Histogram(edges=edges, counts=counts)
        spec = QuantSpec(bits=2, signed=True, exponent=0)
        centers = np.array([-0.5, 0.5])
        q = quantize(centers, spec)
        expected = (1.0 * abs(q[0] + 0.5) + 3.0 * abs(q[1] - 0.5)) / 4.0
        assert histogram_error(h, 0, 2, True, ErrorMeasure.MAE) == pytest.approx(expected, rel=1e-12)

    def test_kl_non_negative_and_improves_with_bits(self):
        rng = np.random.default_rng(1)
        h = hist_of(rng.normal(size=20000), bins=512)
        nc = no_clipping_exponent(4.0)
        kl = [histogram_error(h, nc, b, True, ErrorMeasure.KL) for b in (2, 4, 8)]
        assert all(v >= 0 for v in kl)
        assert kl[2] <= kl[1] <= kl[0]

    def test_empty_histogram_rejected(self):
        h = Histogram(edges=np.array([0.0, 1.0]), counts=np.array([0.0]))
        with pytest.raises(Exception, match="no mass"):
            histogram_error(h, 0, 8, True, ErrorMeasure.MSE)


class TestSelectThreshold:
    def test_zero_iterations_returns_nc(self):
        result = select_threshold(lambda e: 1.0, nc_exponent=3, iterations=0)
        assert result.exponent == 3
        assert result.evaluations == 1

    def test_single_weight_keeps_covering_threshold(self):
        result = select_weight_threshold(np.array([0.5]), bits=8, iterations=4, measure=ErrorMeasure.MSE)
        assert result.exponent == -1
        assert result.nc_exponent == -1

    def test_uniform_data_keeps_nc_threshold(self):
        """Uniform on [-0.9, 0.9]: halving to 0.5 clips 44% of the mass."""
        rng = np.random.default_rng(2)
        data = rng.uniform(-0.9, 0.9, size=30000)
        h = hist_of(data)
        result = select_activation_threshold(
            h, float(np.max(np.abs(data))), bits=8, signed=True,
            measure=ErrorMeasure.MSE, iterations=10,
        )
        assert result.exponent == 0

    def test_matches_exhaustive_oracle(self):
        """Random error tables: equal to exhaustive minimization with
        larger-threshold tie-breaking."""
        rng = np.random.default_rng(3)
        for _ in range(300):
            n = int(rng.integers(0, 12))
            table = rng.choice([0.125, 0.25, 0.5, 1.0, 2.0], size=n + 1)
            nc = int(rng.integers(-5, 6))
            result = select_threshold(lambda e: table[nc - e], nc, n)
            best = min(range(n + 1), key=lambda i: (table[i], i))
            assert result.exponent == nc - best
            assert result.error == table[best]
            assert result.evaluations == n + 1

    def test_error_never_exceeds_nc_error(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            data = rng.normal(scale=rng.uniform(0.1, 10), size=2000)
            h = hist_of(data, bins=512)
            result = select_activation_threshold(
                h, float(np.max(np.abs(data))), bits=8, signed=True,
                measure=ErrorMeasure.MSE, iterations=10,
            )
            assert result.error <= result.nc_error

    def test_clipping_error_grows_for_mass_at_max(self):
        """All mass at the maximum: every halving strictly hurts."""
        h = Histogram(edges=np.array([7.9, 8.1]), counts=np.array([100.0]))
        errors = [histogram_error(h, 3 - i, 8, True, ErrorMeasure.MSE) for i in range(6)]
        assert all(b > a for a, b in zip(errors, errors[1:]))

    def test_nc_measure_skips_search(self):
        calls = []

        def err(e):
            calls.append(e)
            return 0.0

        result = select_weight_threshold(np.array([0.7, -0.2]), bits=8, iterations=10, measure=ErrorMeasure.NC)
        assert result.evaluations == 0
        assert result.exponent == no_clipping_exponent(0.7)
        assert not calls

    def test_negative_iterations_rejected(self):
        with pytest.raises(ValueError):
            select_threshold(lambda e: 0.0, 0, -1)


class TestWeightThresholds:
    def test_symmetric_pair_channel(self):
        exps, results = select_weight_thresholds(
            np.array([[0.5], [-0.5]]), channel_axis=1, bits=8, iterations=4, measure=ErrorMeasure.MSE
        )
        assert exps.tolist() == [-1]
        assert results[0].error <= results[0].nc_error

    def test_all_zero_channel(self):
        exps, results = select_weight_thresholds(
            np.zeros((4, 2)), channel_axis=1, bits=8, iterations=10, measure=ErrorMeasure.MSE
        )
        assert exps.tolist() == [MIN_EXPONENT, MIN_EXPONENT]
        assert results[0].error == 0.0
        assert results[0].evaluations == 0

    def test_sixteen_channels_match_exhaustive_scan(self):
        rng = np.random.default_rng(5)
        w = rng.normal(size=(3, 3, 4, 16)) * rng.uniform(0.05, 5.0, size=16)
        exps, results = select_weight_thresholds(
            w, channel_axis=3, bits=8, iterations=10, measure=ErrorMeasure.MSE
        )
        for k in range(16):
            values = w[..., k].reshape(-1)
            nc = no_clipping_exponent(float(np.max(np.abs(values))))
            errors = [raw_mse(values, nc - i, 8, True) for i in range(11)]
            best = min(range(11), key=lambda i: (errors[i], i))
            assert exps[k] == nc - best
            assert results[k].error == pytest.approx(errors[best], rel=1e-12)

    def test_per_tensor_mode_repeats_one_exponent(self):
        rng = np.random.default_rng(6)
        w = rng.normal(size=(8, 4))
        exps, results = select_weight_thresholds(
            w, channel_axis=1, bits=8, iterations=10, measure=ErrorMeasure.MSE, per_channel=False
        )
        assert len(set(exps.tolist())) == 1
        flat = select_weight_threshold(w.reshape(-1), bits=8, iterations=10, measure=ErrorMeasure.MSE)
        assert exps[0] == flat.exponent

    def test_thresholds_are_powers_of_two(self):
        rng = np.random.default_rng(7)
        w = rng.normal(size=(5, 3))
        exps, results = select_weight_thresholds(
            w, channel_axis=1, bits=8, iterations=6, measure=ErrorMeasure.MSE
        )
        for r in results:
            assert r.threshold == 2.0**r.exponent
            assert math.log2(r.threshold) == r.exponent
