"""Reference executor for float and quantization-simulated graphs.

Kernels are naive numpy with a fixed accumulation order (kernel taps outer,
matmul inner), so repeated runs on the same machine are bit-identical.
Quantized execution is simulated: weights are dequantized from their integer
codes and every activation tensor passes through its symmetric quantizer.
"""

import copy
from dataclasses import dataclass, field

import numpy as np

from .container import quantized_weights
from .errors import GraphError
from .graph import Graph, resolve_padding
from .quantizers import quantize
from .tensor import Tensor


@dataclass
class ExecutionTrace:
    """Every tensor produced while running one sample."""

    tensors: dict
    outputs: list


@dataclass
class EvalReport:
    metric: str
    float_score: float
    quantized_score: float
    per_layer_mse: dict = field(default_factory=dict)

    @property
    def delta(self):
        return self.float_score - self.quantized_score

    @property
    def mean_mse(self):
        if not self.per_layer_mse:
            return 0.0
        return float(np.mean(list(self.per_layer_mse.values())))

    def to_dict(self):
        return {
            "metric": self.metric,
            "float_score": self.float_score,
            "quantized_score": self.quantized_score,
            "delta": self.delta,
            "mean_per_layer_mse": self.mean_mse,
            "per_layer_mse": dict(sorted(self.per_layer_mse.items())),
        }


def _pad2d(x, pads, value):
    pt, pb, pl, pr = pads
    if pt == pb == pl == pr == 0:
        return x
    return np.pad(x, ((pt, pb), (pl, pr), (0, 0)), mode="constant", constant_values=value)


def _conv2d(x, w, bias, stride, padding, pad_value):
    kh, kw, cin, cout = w.shape
    xp = _pad2d(x, resolve_padding(padding, x.shape[0], x.shape[1], kh, kw, stride), pad_value)
    oh = (xp.shape[0] - kh) // stride + 1
    ow = (xp.shape[1] - kw) // stride + 1
    out = np.zeros((oh, ow, cout))
    for u in range(kh):
        for v in range(kw):
            patch = xp[u : u + oh * stride : stride, v : v + ow * stride : stride, :]
            out += patch @ w[u, v]
    if bias is not None:
        out += bias
    return out


def _depthwise_conv2d(x, w, bias, stride, padding, pad_value):
    kh, kw, c, _ = w.shape
    xp = _pad2d(x, resolve_padding(padding, x.shape[0], x.shape[1], kh, kw, stride), pad_value)
    oh = (xp.shape[0] - kh) // stride + 1
    ow = (xp.shape[1] - kw) // stride + 1
    out = np.zeros((oh, ow, c))
    for u in range(kh):
        for v in range(kw):
            patch = xp[u : u + oh * stride : stride, v : v + ow * stride : stride, :]
            out += patch * w[u, v, :, 0]
    if bias is not None:
        out += bias
    return out


def _max_pool(x, pool, stride, padding):
    xp = _pad2d(x, resolve_padding(padding, x.shape[0], x.shape[1], pool, pool, stride), -np.inf)
    oh = (xp.shape[0] - pool) // stride + 1
    ow = (xp.shape[1] - pool) // stride + 1
    out = np.full((oh, ow, x.shape[2]), -np.inf)
    for u in range(pool):
        for v in range(pool):
            patch = xp[u : u + oh * stride : stride, v : v + ow * stride : stride, :]
            out = np.maximum(out, patch)
    return out


def _softmax(x):
    e = np.exp(x - np.max(x))
    return e / np.sum(e)


def _eval_node(node, values, weights=None):
    ins = [values[t] for t in node.inputs]
    if node.kind == "conv2d":
        return _conv2d(ins[0], weights, node.bias, node.stride, node.padding, node.pad_value)
    if node.kind == "depthwise_conv2d":
        return _depthwise_conv2d(ins[0], weights, node.bias, node.stride, node.padding, node.pad_value)
    if node.kind == "dense":
        out = ins[0] @ weights
        return out + node.bias if node.bias is not None else out
    if node.kind == "batch_norm":
        scale = node.gamma / np.sqrt(node.variance + node.eps)
        return (ins[0] - node.mean) * scale + node.beta
    if node.kind == "activation":
        return node.act.apply(ins[0])
    if node.kind == "add":
        return ins[0] + ins[1]
    if node.kind == "global_avg_pool":
        return ins[0].mean(axis=(0, 1), keepdims=True)
    if node.kind == "max_pool":
        return _max_pool(ins[0], node.pool, node.stride, node.padding)
    if node.kind == "flatten":
        return ins[0].reshape(-1)
    if node.kind == "softmax":
        return _softmax(ins[0])
    raise GraphError(f"node {node.id}: unsupported op {node.kind!r}", code="unsupported_op")


def _check_input(graph, x):
    if isinstance(x, Tensor):
        arr, layout = x.array, x.layout
    else:
        arr, layout = np.asarray(x, dtype=np.float64), graph.inputs[0].layout
    inp = graph.inputs[0]
    if tuple(arr.shape) != tuple(inp.shape):
        raise GraphError(
            f"input shape {arr.shape} does not match graph input {tuple(inp.shape)}", code="shape_mismatch"
        )
    return arr, layout


def _trace(graph, values, shapes):
    tensors = {
        name: Tensor.from_array(values[name], layout=shapes[name][1]) for name in values
    }
    return ExecutionTrace(tensors=tensors, outputs=[tensors[t] for t in graph.outputs])


def run_float(graph: Graph, x) -> ExecutionTrace:
    """Exact float semantics for every node."""
    arr, _ = _check_input(graph, x)
    shapes = graph.infer_shapes()
    values = {graph.inputs[0].name: arr}
    for node in graph.nodes:
        values[node.output] = _eval_node(node, values, weights=node.weights)
    return _trace(graph, values, shapes)


def run_quantized(graph: Graph, x) -> ExecutionTrace:
    """Simulated quantized inference.

    Weights come from their per-channel integer codes; each activation tensor
    (including the graph input) is passed through its symmetric quantizer.
    Padding of shifted tensors injects the quantized shift value so padded
    positions represent the pre-shift zero.
    """
    graph.assert_fully_quantized()
    arr, _ = _check_input(graph, x)
    shapes = graph.infer_shapes()
    name = graph.inputs[0].name
    values = {name: quantize(arr, graph.input_quant[name])}
    producers = graph.producer_map()
    for node in graph.nodes:
        w = quantized_weights(node) if node.is_linear else None
        if node.is_linear and node.pad_value:
            # pad with the code nearest the shifted zero, like the input data
            src = node.inputs[0]
            src_spec = producers[src].out_quant if src in producers else graph.input_quant[src]
            node = _with_pad_value(node, float(quantize(node.pad_value, src_spec)))
        out = _eval_node(node, values, weights=w)
        values[node.output] = quantize(out, node.out_quant)
    return _trace(graph, values, shapes)


def _with_pad_value(node, value):
    clone = copy.copy(node)
    clone.pad_value = value
    return clone


def aligned_quant_value(node, value):
    """Map a quantized-trace tensor back to the float graph's coordinates.

    Rewrites that shift (negative-range correction) or rescale (channel
    equalization) a tensor record how to undo it, so quantization noise can be
    compared against the original float trace.
    """
    arr = value.array if isinstance(value, Tensor) else np.asarray(value)
    if node is None:
        return arr
    if node.kind == "activation" and node.act is not None and node.act.shift:
        arr = arr - node.act.shift
    if node.descale is not None:
        arr = arr * node.descale
    return arr


def per_layer_mse(float_graph: Graph, quant_graph: Graph, samples, quantized=True):
    """Mean squared difference per tensor, averaged over samples.

    Tensors are matched by name; names only in one graph (e.g. pre-folding
    batch-norm inputs) are skipped. Quantized-trace values are mapped back to
    the float graph's coordinates first.
    """
    producers = quant_graph.producer_map()
    sums = {}
    count = 0
    for s in samples:
        tf = run_float(float_graph, s).tensors
        tq = (run_quantized if quantized else run_float)(quant_graph, s).tensors
        common = sorted(set(tf) & set(tq))
        for name in common:
            ref = tf[name].array
            got = aligned_quant_value(producers.get(name), tq[name])
            sums[name] = sums.get(name, 0.0) + float(np.mean((got - ref) ** 2))
        count += 1
    return {name: total / count for name, total in sorted(sums.items())}


def top1_accuracy(graph: Graph, samples, labels, quantized=False):
    run = run_quantized if quantized else run_float
    hits = 0
    for s, label in zip(samples, labels):
        out = run(graph, s).outputs[0].array.reshape(-1)
        hits += int(np.argmax(out) == label)
    return hits / len(labels)


def evaluate(float_graph: Graph, quant_graph: Graph, samples, labels) -> EvalReport:
    """Top-1 accuracy of both graphs plus the per-layer quantization MSE table."""
    if labels is None:
        raise GraphError("labelled dataset required for evaluation", code="bad_params")
    if len(labels) != len(samples):
        raise GraphError(
            f"label count {len(labels)} does not match sample count {len(samples)}", code="shape_mismatch"
        )
    return EvalReport(
        metric="top1_accuracy",
        float_score=top1_accuracy(float_graph, samples, labels, quantized=False),
        quantized_score=top1_accuracy(quant_graph, samples, labels, quantized=True),
        per_layer_mse=per_layer_mse(float_graph, quant_graph, samples),
    )
