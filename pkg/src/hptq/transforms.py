"""Graph rewrites: batch-norm folding, shift negative correction, max channel
equalization, and bias correction.

Folding, equalization, and the shift rewrite all preserve the float function
of the network; bias correction changes only bias vectors so that quantized
output means match the float means over the calibration data.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .container import quantized_weights
from .errors import GraphError, StatsError
from .graph import Graph
from .quantizers import QuantSpec

logger = logging.getLogger("hptq")


# ---------------------------------------------------------------------------
# Batch-norm folding
# ---------------------------------------------------------------------------


def fold_batch_norm(graph: Graph) -> Graph:
    """Fold every batch_norm into the linear layer producing its input.

    The merged layer keeps the batch_norm's output tensor name, so traces of
    the folded and unfolded graphs stay comparable downstream.
    """
    g = graph.copy()
    while True:
        bn = next((n for n in g.nodes if n.kind == "batch_norm"), None)
        if bn is None:
            break
        producers = g.producer_map()
        consumers = g.consumer_map()
        src = bn.inputs[0]
        producer = producers.get(src)
        if producer is None or not producer.is_linear:
            raise GraphError(
                f"batch_norm {bn.id} does not follow a linear layer", code="bad_params"
            )
        if len(consumers.get(src, [])) != 1 or src in g.outputs:
            raise GraphError(
                f"batch_norm {bn.id}: producer output {src!r} has other consumers", code="bad_params"
            )
        scale = bn.gamma / np.sqrt(bn.variance + bn.eps)
        axis = producer.weight_channel_axis()
        shape = [1] * producer.weights.ndim
        shape[axis] = -1
        producer.weights = producer.weights * scale.reshape(shape)
        base = producer.bias if producer.bias is not None else np.zeros_like(bn.mean)
        producer.bias = bn.beta + (base - bn.mean) * scale
        producer.output = bn.output
        g.nodes.remove(bn)
    g.validate()
    return g


# ---------------------------------------------------------------------------
# Shift negative correction
# ---------------------------------------------------------------------------


@dataclass
class ShiftRecord:
    layer: str
    shift: float
    ratio: float
    consumers: list


def apply_snc(graph: Graph, store, alpha: float) -> tuple:
    """Shift mildly-negative activations positive and requantize unsigned.

    A tensor qualifies when its observed minimum s is negative and |s| is less
    than alpha times its selected threshold. The activation becomes
    phi + |s|, its quantizer switches to unsigned with the same threshold
    (doubling grid resolution), and each consuming linear layer absorbs the
    compensating subtraction into its bias. Convolution consumers also pad
    with |s|, the image of the original zero, so the rewrite is exact at
    borders. Tensors whose consumers cannot absorb the shift are skipped.
    """
    if not 0 < alpha < 1:
        raise ValueError(f"snc alpha must be in (0, 1), got {alpha}")
    g = graph.copy()
    consumers = g.consumer_map()
    records = []
    for node in g.nodes:
        if node.kind != "activation" or node.act.shift:
            continue
        if node.out_quant is None:
            raise GraphError(f"node {node.id}: threshold not selected before SNC", code="bad_params")
        observed_min = store[node.output].tensor_min
        if observed_min >= 0:
            continue
        shift = abs(observed_min)
        ratio = shift / node.out_quant.threshold
        if ratio >= alpha:
            continue
        eaters = consumers.get(node.output, [])
        if node.output in g.outputs or not eaters or not all(c.is_linear for c in eaters):
            logger.warning(
                "snc: skipping tensor %s (consumers cannot absorb a shift)", node.output
            )
            continue
        node.act.shift = shift
        node.out_quant = QuantSpec(bits=node.out_quant.bits, signed=False, exponent=node.out_quant.exponent)
        for c in eaters:
            _absorb_shift(c, shift)
        records.append(ShiftRecord(layer=node.id, shift=shift, ratio=ratio, consumers=[c.id for c in eaters]))
    g.validate()
    return g, records


def _absorb_shift(node, shift):
    axis = node.weight_channel_axis()
    taps = tuple(a for a in range(node.weights.ndim) if a != axis)
    delta = shift * node.weights.sum(axis=taps)
    if node.bias is None:
        node.bias = -delta
    else:
        node.bias = node.bias - delta
    if node.kind in ("conv2d", "depthwise_conv2d"):
        node.pad_value = node.pad_value + shift


# ---------------------------------------------------------------------------
# Max channel equalization
# ---------------------------------------------------------------------------

EQUALIZABLE = ("relu", "relu6", "prelu")


@dataclass
class EqualizedTriple:
    first: str
    activation: str
    second: str
    scales: np.ndarray


@dataclass
class EqualizationPlan:
    triples: list

    def __iter__(self):
        return iter(self.triples)

    def __len__(self):
        return len(self.triples)


def equalize_activations(graph: Graph, store) -> tuple:
    """Rescale linear->activation->linear triples so channel maxima reach the
    activation's threshold.

    Per channel, scale s_k = min(v_k / t, 1) with v_k the observed channel max
    magnitude; the first layer is divided by s_k, the second multiplied, and a
    clipped relu's saturation point is relaxed per channel. Positive scale
    equivariance keeps the float function unchanged.
    """
    g = graph.copy()
    producers = g.producer_map()
    consumers = g.consumer_map()
    triples = []
    for act in g.nodes:
        if act.kind != "activation" or act.act.kind not in EQUALIZABLE or act.act.shift:
            continue
        first = producers.get(act.inputs[0])
        if first is None or not first.is_linear:
            continue
        if len(consumers.get(first.output, [])) != 1 or first.output in g.outputs:
            continue
        eaters = consumers.get(act.output, [])
        if len(eaters) != 1 or not eaters[0].is_linear or act.output in g.outputs:
            continue
        second = eaters[0]
        if act.out_quant is None:
            raise GraphError(f"node {act.id}: threshold not selected before equalization", code="bad_params")
        v = store[act.output].per_channel_max_abs
        t = act.out_quant.threshold
        scales = np.minimum(v / t, 1.0)
        scales[v == 0] = 1.0
        if np.all(scales == 1.0):
            continue
        _scale_out_channels(first, 1.0 / scales)
        _scale_in_channels(second, scales)
        if act.act.kind == "relu6":
            act.act.clip = np.asarray(act.act.clip, dtype=np.float64) / scales
        first.descale = scales.copy()
        act.descale = scales.copy()
        triples.append(
            EqualizedTriple(first=first.id, activation=act.id, second=second.id, scales=scales)
        )
    g.validate()
    return g, EqualizationPlan(triples=triples)


def _scale_out_channels(node, factors):
    axis = node.weight_channel_axis()
    shape = [1] * node.weights.ndim
    shape[axis] = -1
    node.weights = node.weights * factors.reshape(shape)
    if node.bias is not None:
        node.bias = node.bias * factors


def _scale_in_channels(node, factors):
    if node.kind == "conv2d":
        node.weights = node.weights * factors.reshape(1, 1, -1, 1)
    elif node.kind == "depthwise_conv2d":
        node.weights = node.weights * factors.reshape(1, 1, -1, 1)
    elif node.kind == "dense":
        node.weights = node.weights * factors.reshape(-1, 1)
    else:
        raise GraphError(f"node {node.id} cannot be rescaled", code="bad_params")


# ---------------------------------------------------------------------------
# Bias correction
# ---------------------------------------------------------------------------


@dataclass
class BiasCorrectionRecord:
    layer: str
    delta: np.ndarray


def bias_correction(graph: Graph, store) -> tuple:
    """Add (W - W_quantized) . E[x] to every linear layer's bias.

    Cancels the output-mean shift induced by weight quantization; E[x] is the
    per-channel empirical input mean from statistics collection. Weight
    thresholds must already be chosen.
    """
    g = graph.copy()
    records = []
    for node in g.nodes:
        if not node.is_linear:
            continue
        if node.weight_exponents is None or node.weight_bits is None:
            raise GraphError(f"node {node.id}: weight thresholds not selected", code="bad_params")
        src = node.inputs[0]
        if src not in store:
            raise StatsError(f"missing input-mean statistics for tensor {src!r}")
        mean_in = store[src].per_channel_mean
        eps_w = node.weights - quantized_weights(node)
        if node.kind == "conv2d":
            delta = np.einsum("uvik,i->k", eps_w, mean_in)
        elif node.kind == "depthwise_conv2d":
            delta = (eps_w[:, :, :, 0] * mean_in).sum(axis=(0, 1))
        else:
            delta = eps_w.T @ mean_in
        node.bias = delta if node.bias is None else node.bias + delta
        records.append(BiasCorrectionRecord(layer=node.id, delta=delta))
    return g, records
