"""End-to-end quantization pipeline and the ablation driver.

Stage order: batch-norm folding, statistics collection, outlier removal,
activation threshold selection, shift negative correction, channel
equalization (with statistics refresh and threshold re-selection for touched
tensors), per-channel weight threshold selection, bias correction. Feature
toggles skip individual stages for ablation runs.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .calibrate import (
    ErrorMeasure,
    select_activation_threshold,
    select_weight_thresholds,
)
from .engine import evaluate, per_layer_mse
from .errors import HptqError, PipelineError
from .graph import Graph
from .quantizers import QuantSpec
from .stats import collect_statistics
from .transforms import apply_snc, bias_correction, equalize_activations, fold_batch_norm

REPORT_SCHEMA_VERSION = 1

STAGE_NAMES = (
    "bn_fold",
    "outlier_removal",
    "snc",
    "equalization",
    "per_channel_weights",
    "bias_correction",
)


@dataclass(frozen=True)
class PipelineConfig:
    bits: int = 8
    error_measure: ErrorMeasure = ErrorMeasure.MSE
    z_threshold: float = 24.0
    snc_alpha: float = 0.25
    iterations: int = 10
    bins: int = 2048
    bn_fold: bool = True
    outlier_removal: bool = True
    snc: bool = True
    equalization: bool = True
    per_channel_weights: bool = True
    bias_correction: bool = True

    def disable(self, names):
        """New config with the named stages switched off."""
        changes = {}
        for name in names:
            if name not in STAGE_NAMES:
                raise ValueError(f"unknown stage {name!r} (expected one of {', '.join(STAGE_NAMES)})")
            changes[name] = False
        return replace(self, **changes)

    def to_dict(self):
        return {
            "bits": self.bits,
            "error_measure": self.error_measure.value,
            "z_threshold": self.z_threshold,
            "snc_alpha": self.snc_alpha,
            "iterations": self.iterations,
            "bins": self.bins,
            "toggles": {name: getattr(self, name) for name in STAGE_NAMES},
        }


def _stage(name):
    """Re-raise stage failures with the stage name attached."""

    class _ctx:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and isinstance(exc, HptqError) and not isinstance(exc, PipelineError):
                raise PipelineError(f"stage {name}: {exc}") from exc
            return False

    return _ctx()


def quantize_pipeline(graph: Graph, calib, config: PipelineConfig = PipelineConfig()):
    """Quantize a float graph against a calibration set.

    Returns the quantized graph (thresholds and weight exponents filled in)
    and a JSON-serializable report of everything each stage did.
    """
    if calib is None or calib.n_samples < 1:
        raise PipelineError("calibration set empty")
    graph.validate()
    reference = graph.copy()
    stages = []

    g = graph.copy()
    if config.bn_fold:
        with _stage("bn_fold"):
            before = [n.id for n in g.nodes if n.kind == "batch_norm"]
            g = fold_batch_norm(g)
            stages.append({"stage": "bn_fold", "folded": before})

    with _stage("statistics"):
        store = collect_statistics(g, calib, config.bins)
        stages.append({"stage": "statistics", "samples": calib.n_samples, "tensors": len(store.ids())})

    selection_store = store
    if config.outlier_removal:
        with _stage("outlier_removal"):
            selection_store = store.with_outlier_removal(config.z_threshold)
            zeroed = {
                tid: int(np.count_nonzero(store[tid].histogram.counts) - np.count_nonzero(selection_store[tid].histogram.counts))
                for tid in store.ids()
            }
            stages.append(
                {
                    "stage": "outlier_removal",
                    "z_threshold": config.z_threshold,
                    "bins_zeroed": {k: v for k, v in sorted(zeroed.items()) if v},
                }
            )

    with _stage("activation_thresholds"):
        act_results = _select_activation_specs(g, selection_store, config)
        stages.append(_threshold_stage_entry(act_results, config))

    if config.snc:
        with _stage("snc"):
            g, shift_records = apply_snc(g, store, config.snc_alpha)
            stages.append(
                {
                    "stage": "snc",
                    "alpha": config.snc_alpha,
                    "shifted": [
                        {"layer": r.layer, "shift": r.shift, "ratio": r.ratio, "consumers": r.consumers}
                        for r in shift_records
                    ],
                }
            )
            if shift_records:
                store = collect_statistics(g, calib, config.bins)
                selection_store = store.with_outlier_removal(config.z_threshold) if config.outlier_removal else store

    if config.equalization:
        with _stage("equalization"):
            g, plan = equalize_activations(g, store)
            stages.append(
                {
                    "stage": "equalization",
                    "triples": [
                        {
                            "first": t.first,
                            "activation": t.activation,
                            "second": t.second,
                            "min_scale": float(t.scales.min()),
                            "scales": [float(s) for s in t.scales],
                        }
                        for t in plan
                    ],
                }
            )
            if len(plan):
                store = collect_statistics(g, calib, config.bins)
                selection_store = store.with_outlier_removal(config.z_threshold) if config.outlier_removal else store
                touched = set()
                for t in plan:
                    touched.add(g.node(t.first).output)
                    touched.add(g.node(t.activation).output)
                reselect = _select_activation_specs(g, selection_store, config, only=touched)
                act_results.update(reselect)
                stages.append(_threshold_stage_entry(reselect, config, name="activation_thresholds_reselected"))

    with _stage("weight_thresholds"):
        weight_results = {}
        for node in g.nodes:
            if not node.is_linear:
                continue
            exponents, results = select_weight_thresholds(
                node.weights,
                node.weight_channel_axis(),
                config.bits,
                config.iterations,
                config.error_measure,
                per_channel=config.per_channel_weights,
            )
            node.weight_exponents = exponents
            node.weight_bits = config.bits
            weight_results[node.id] = results
        stages.append(
            {
                "stage": "weight_thresholds",
                "per_channel": config.per_channel_weights,
                "measure": config.error_measure.value,
                "results": {
                    nid: {
                        "exponents": [r.exponent for r in rs],
                        "nc_exponents": [r.nc_exponent for r in rs],
                        "errors": [_jsonable(r.error) for r in rs],
                        "nc_errors": [_jsonable(r.nc_error) for r in rs],
                    }
                    for nid, rs in sorted(weight_results.items())
                },
            }
        )

    if config.bias_correction:
        with _stage("bias_correction"):
            g, bc_records = bias_correction(g, store)
            stages.append(
                {
                    "stage": "bias_correction",
                    "layers": {r.layer: float(np.max(np.abs(r.delta))) for r in bc_records},
                }
            )

    with _stage("per_layer_mse"):
        table = per_layer_mse(reference, g, calib.samples)
        stages.append(
            {
                "stage": "per_layer_mse",
                "table": table,
                "mean": float(np.mean(list(table.values()))),
            }
        )

    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "config": config.to_dict(),
        "stages": stages,
    }
    return g, report


def _select_activation_specs(g, store, config, only=None):
    """Pick a threshold for every activation tensor (graph input included).

    A tensor is quantized unsigned when it was never observed negative.
    Returns tensor id -> ThresholdResult and writes the specs onto the graph.
    """
    results = {}
    input_names = [i.name for i in g.inputs]
    producers = g.producer_map()
    for name in input_names + [n.output for n in g.nodes]:
        if only is not None and name not in only:
            continue
        ts = store[name]
        signed = ts.tensor_min < 0
        res = select_activation_threshold(
            ts.histogram, ts.tensor_max_abs, config.bits, signed, config.error_measure, config.iterations
        )
        spec = QuantSpec(bits=config.bits, signed=signed, exponent=res.exponent)
        if name in input_names:
            g.input_quant[name] = spec
        else:
            producer = producers[name]
            if producer.kind == "activation" and producer.act.shift:
                # shifted tensors keep their unsigned spec with the same threshold
                results[name] = res
                continue
            producer.out_quant = spec
        results[name] = res
    return results


def _threshold_stage_entry(results, config, name="activation_thresholds"):
    return {
        "stage": name,
        "measure": config.error_measure.value,
        "results": {
            tid: {
                "exponent": r.exponent,
                "nc_exponent": r.nc_exponent,
                "error": _jsonable(r.error),
                "nc_error": _jsonable(r.nc_error),
                "evaluations": r.evaluations,
            }
            for tid, r in sorted(results.items())
        },
    }


def _jsonable(x):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return None
    return float(x)


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

ABLATION_LADDER = (
    ("baseline_nc", {"error_measure": ErrorMeasure.NC, "off": STAGE_NAMES[1:]}),
    ("+mse_thresholds", {"error_measure": ErrorMeasure.MSE, "off": STAGE_NAMES[1:]}),
    ("+outlier_removal", {"error_measure": ErrorMeasure.MSE, "off": ("snc", "equalization", "per_channel_weights", "bias_correction")}),
    ("+snc", {"error_measure": ErrorMeasure.MSE, "off": ("equalization", "per_channel_weights", "bias_correction")}),
    ("+equalization", {"error_measure": ErrorMeasure.MSE, "off": ("per_channel_weights", "bias_correction")}),
    ("+per_channel_weights", {"error_measure": ErrorMeasure.MSE, "off": ("bias_correction",)}),
    ("+bias_correction", {"error_measure": ErrorMeasure.MSE, "off": ()}),
)


def run_ablation(graph: Graph, calib, samples, labels, base_config: PipelineConfig = PipelineConfig()):
    """Quantize under the incremental feature ladder and evaluate each step.

    Batch-norm folding stays on throughout: it is pre-processing, not one of
    the accuracy techniques under study.
    """
    rows = []
    for name, spec in ABLATION_LADDER:
        config = replace(base_config, error_measure=spec["error_measure"]).disable(spec["off"])
        quant, report = quantize_pipeline(graph, calib, config)
        result = evaluate(graph, quant, samples, labels)
        mse_stage = next(s for s in report["stages"] if s["stage"] == "per_layer_mse")
        rows.append(
            {
                "configuration": name,
                "float_accuracy": result.float_score,
                "quantized_accuracy": result.quantized_score,
                "delta": result.delta,
                "mean_per_layer_mse": mse_stage["mean"],
            }
        )
    return rows
