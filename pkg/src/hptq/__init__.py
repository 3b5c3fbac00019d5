"""Hardware-friendly post-training quantization toolkit.

Rewrites a floating-point network graph into one whose activations and
weights use uniform, symmetric quantizers with power-of-two thresholds
(zero-point 0, weights per channel), calibrated from a representative
dataset only.
"""

from .calibrate import (
    ErrorMeasure,
    ThresholdResult,
    histogram_error,
    no_clipping_exponent,
    select_threshold,
    select_weight_thresholds,
)
from .container import (
    CalibrationSet,
    load_dataset,
    load_model,
    save_dataset,
    save_model,
    save_quantized,
)
from .engine import EvalReport, ExecutionTrace, evaluate, per_layer_mse, run_float, run_quantized
from .errors import ContainerError, GraphError, HptqError, PipelineError, StatsError
from .graph import Activation, Graph, GraphInput, Node
from .pipeline import PipelineConfig, quantize_pipeline, run_ablation
from .quantizers import (
    MIN_EXPONENT,
    QuantSpec,
    UniformSpec,
    dequantize_int,
    quantize,
    quantize_int,
    uniform_quantize,
)
from .stats import Histogram, StatsStore, TensorStats, collect_statistics, remove_outliers
from .tensor import Tensor, channel_reduce, max_abs
from .transforms import apply_snc, bias_correction, equalize_activations, fold_batch_norm

__version__ = "0.1.0"

__all__ = [
    "Activation",
    "CalibrationSet",
    "ContainerError",
    "ErrorMeasure",
    "EvalReport",
    "ExecutionTrace",
    "Graph",
    "GraphError",
    "GraphInput",
    "Histogram",
    "HptqError",
    "MIN_EXPONENT",
    "Node",
    "PipelineConfig",
    "PipelineError",
    "QuantSpec",
    "StatsError",
    "StatsStore",
    "Tensor",
    "TensorStats",
    "ThresholdResult",
    "UniformSpec",
    "apply_snc",
    "bias_correction",
    "channel_reduce",
    "collect_statistics",
    "dequantize_int",
    "equalize_activations",
    "evaluate",
    "fold_batch_norm",
    "histogram_error",
    "load_dataset",
    "load_model",
    "max_abs",
    "no_clipping_exponent",
    "per_layer_mse",
    "quantize",
    "quantize_int",
    "quantize_pipeline",
    "remove_outliers",
    "run_ablation",
    "run_float",
    "run_quantized",
    "save_dataset",
    "save_model",
    "save_quantized",
    "select_threshold",
    "select_weight_thresholds",
    "uniform_quantize",
]
