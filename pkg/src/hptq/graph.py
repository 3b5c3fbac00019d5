"""Typed DAG of network layers with weight payloads.

Nodes are stored in topological order and each tensor has exactly one
producer. Tensor names default to the producing node id; graph rewrites that
merge nodes keep the downstream tensor name so traces of the original and the
rewritten graph stay comparable.
"""

import copy
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import GraphError
from .quantizers import QuantSpec

NODE_KINDS = (
    "conv2d",
    "depthwise_conv2d",
    "dense",
    "batch_norm",
    "activation",
    "add",
    "global_avg_pool",
    "max_pool",
    "flatten",
    "softmax",
)

LINEAR_KINDS = ("conv2d", "depthwise_conv2d", "dense")

ACTIVATION_KINDS = (
    "relu",
    "relu6",
    "leaky_relu",
    "prelu",
    "swish",
    "selu",
    "hswish",
    "identity",
)

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772


@dataclass
class Activation:
    """Elementwise non-linearity, plus the rewrite knobs transforms may set.

    `clip` is the saturation point of relu6; a per-channel vector after range
    equalization relaxes it. `shift` is the positive constant added by the
    shift-negative rewrite (the matching subtraction lives in the consumer).
    """

    kind: str = "relu"
    slope: float = 0.01
    slopes: np.ndarray | None = None
    clip: float | np.ndarray = 6.0
    shift: float = 0.0

    def validate(self):
        if self.kind not in ACTIVATION_KINDS:
            raise GraphError(f"unknown activation kind {self.kind!r}", code="bad_params")
        if self.kind == "prelu" and self.slopes is None:
            raise GraphError("prelu requires per-channel slopes", code="bad_params")
        if self.kind == "prelu" and not np.all(np.isfinite(self.slopes)):
            raise GraphError("prelu slopes must be finite", code="bad_params")
        if self.kind == "leaky_relu" and not np.isfinite(self.slope):
            raise GraphError("leaky_relu slope must be finite", code="bad_params")
        if self.kind == "relu6" and np.any(np.asarray(self.clip) <= 0):
            raise GraphError("relu6 clip value must be positive", code="bad_params")

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        k = self.kind
        if k == "relu":
            y = np.maximum(x, 0.0)
        elif k == "relu6":
            y = np.clip(x, 0.0, self.clip)
        elif k == "leaky_relu":
            y = np.where(x >= 0, x, self.slope * x)
        elif k == "prelu":
            y = np.where(x >= 0, x, self.slopes * x)
        elif k == "swish":
            y = x / (1.0 + np.exp(-x))
        elif k == "selu":
            y = SELU_LAMBDA * np.where(x >= 0, x, SELU_ALPHA * (np.exp(x) - 1.0))
        elif k == "hswish":
            y = x * np.clip(x + 3.0, 0.0, 6.0) / 6.0
        elif k == "identity":
            y = x
        else:
            raise GraphError(f"unknown activation kind {k!r}", code="bad_params")
        if self.shift:
            y = y + self.shift
        return y

    def to_dict(self):
        d = {"kind": self.kind}
        if self.kind == "leaky_relu":
            d["slope"] = float(self.slope)
        if self.kind == "relu6":
            if np.ndim(self.clip) == 0:
                d["clip"] = float(self.clip)
        if self.shift:
            d["shift"] = float(self.shift)
        return d


@dataclass
class Node:
    id: str
    kind: str
    inputs: list = field(default_factory=list)
    output: str = ""
    # linear ops
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None
    stride: int = 1
    padding: object = "valid"  # "same" | "valid" | (top, bottom, left, right)
    pad_value: float = 0.0
    # max_pool
    pool: int = 2
    # batch_norm
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    mean: np.ndarray | None = None
    variance: np.ndarray | None = None
    eps: float = 1e-3
    # activation
    act: Activation | None = None
    # quantization slots (empty until the pipeline fills them)
    out_quant: QuantSpec | None = None
    weight_bits: int | None = None
    weight_exponents: np.ndarray | None = None
    # undo metadata for trace alignment: original value = value * descale - 0
    descale: np.ndarray | None = None

    def __post_init__(self):
        if not self.output:
            self.output = self.id

    @property
    def is_linear(self):
        return self.kind in LINEAR_KINDS

    def weight_channel_axis(self):
        """Axis of the weight array that indexes output channels."""
        if self.kind == "conv2d":
            return 3
        if self.kind == "depthwise_conv2d":
            return 2
        if self.kind == "dense":
            return 1
        raise GraphError(f"node {self.id} has no weights", code="bad_params")

    def out_channels(self):
        return self.weights.shape[self.weight_channel_axis()]


@dataclass
class GraphInput:
    name: str
    shape: tuple
    layout: str = "hwc"


@dataclass
class Graph:
    nodes: list
    inputs: list
    outputs: list
    input_quant: dict = field(default_factory=dict)

    def copy(self):
        return copy.deepcopy(self)

    def node(self, node_id):
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise GraphError(f"no node with id {node_id!r}", code="dangling_edge")

    def producer_map(self):
        """tensor name -> producing node (graph inputs excluded)."""
        out = {}
        for n in self.nodes:
            if n.output in out:
                raise GraphError(
                    f"tensor {n.output!r} has two producers ({out[n.output].id}, {n.id})",
                    code="duplicate_producer",
                )
            out[n.output] = n
        return out

    def consumer_map(self):
        """tensor name -> list of consuming nodes."""
        out = {}
        for n in self.nodes:
            for t in n.inputs:
                out.setdefault(t, []).append(n)
        return out

    def tensor_names(self):
        """All activation tensor names: graph inputs plus every node output."""
        return [i.name for i in self.inputs] + [n.output for n in self.nodes]

    def validate(self):
        producers = self.producer_map()
        input_names = {i.name for i in self.inputs}
        clash = input_names & set(producers)
        if clash:
            raise GraphError(f"tensors produced twice: {sorted(clash)}", code="duplicate_producer")
        seen = set(input_names)
        for n in self.nodes:
            if n.kind not in NODE_KINDS:
                raise GraphError(f"node {n.id}: unsupported op {n.kind!r}", code="unsupported_op")
            for t in n.inputs:
                if t not in input_names and t not in producers:
                    raise GraphError(f"node {n.id}: input {t!r} has no producer", code="dangling_edge")
                if t not in seen:
                    raise GraphError(
                        f"node {n.id}: input {t!r} appears after its consumer; nodes must be topologically ordered",
                        code="not_topological",
                    )
            if n.kind == "activation":
                if n.act is None:
                    raise GraphError(f"node {n.id}: activation node without function", code="bad_params")
                n.act.validate()
            seen.add(n.output)
        for t in self.outputs:
            if t not in seen:
                raise GraphError(f"graph output {t!r} has no producer", code="dangling_edge")
        self.infer_shapes()
        return self

    def infer_shapes(self):
        """Shape and layout of every tensor; raises on any mismatch."""
        shapes = {i.name: (tuple(i.shape), i.layout) for i in self.inputs}
        for n in self.nodes:
            in_shapes = [shapes[t] for t in n.inputs]
            shapes[n.output] = _infer_node_shape(n, in_shapes)
        return shapes

    def assert_fully_quantized(self):
        for name in (i.name for i in self.inputs):
            if name not in self.input_quant:
                raise GraphError(f"missing quantization parameters for tensor {name!r}", code="missing_quant_params")
        for n in self.nodes:
            if n.out_quant is None:
                raise GraphError(f"missing quantization parameters for tensor {n.output!r}", code="missing_quant_params")
            if n.is_linear and (n.weight_exponents is None or n.weight_bits is None):
                raise GraphError(f"missing weight quantization for node {n.id!r}", code="missing_quant_params")


def resolve_padding(padding, in_h, in_w, kh, kw, stride):
    """Per-side padding (top, bottom, left, right).

    "same" follows the convention where any odd total pad goes after
    (bottom/right), matching the common framework behaviour.
    """
    if padding == "valid":
        return (0, 0, 0, 0)
    if padding == "same":
        out_h = -(-in_h // stride)
        out_w = -(-in_w // stride)
        total_h = max((out_h - 1) * stride + kh - in_h, 0)
        total_w = max((out_w - 1) * stride + kw - in_w, 0)
        return (total_h // 2, total_h - total_h // 2, total_w // 2, total_w - total_w // 2)
    t, b, l, r = (int(v) for v in padding)
    return (t, b, l, r)


def _conv_out_hw(in_h, in_w, kh, kw, stride, padding):
    pt, pb, pl, pr = resolve_padding(padding, in_h, in_w, kh, kw, stride)
    return (in_h + pt + pb - kh) // stride + 1, (in_w + pl + pr - kw) // stride + 1


def _infer_node_shape(n, in_shapes):
    def fail(msg):
        raise GraphError(f"node {n.id}: {msg}", code="shape_mismatch")

    if n.kind == "conv2d":
        (shape, layout), = in_shapes
        if layout != "hwc" or len(shape) != 3:
            fail(f"conv2d expects an hwc input, got {shape} ({layout})")
        kh, kw, cin, cout = n.weights.shape
        if cin != shape[2]:
            fail(f"weight expects {cin} input channels, tensor has {shape[2]}")
        if n.bias is not None and n.bias.shape != (cout,):
            fail(f"bias shape {n.bias.shape} != ({cout},)")
        oh, ow = _conv_out_hw(shape[0], shape[1], kh, kw, n.stride, n.padding)
        if oh <= 0 or ow <= 0:
            fail(f"kernel {kh}x{kw} does not fit input {shape[:2]}")
        return (oh, ow, cout), "hwc"
    if n.kind == "depthwise_conv2d":
        (shape, layout), = in_shapes
        if layout != "hwc":
            fail("depthwise_conv2d expects an hwc input")
        kh, kw, c, mult = n.weights.shape
        if mult != 1:
            fail("depthwise channel multiplier must be 1")
        if c != shape[2]:
            fail(f"weight expects {c} channels, tensor has {shape[2]}")
        if n.bias is not None and n.bias.shape != (c,):
            fail(f"bias shape {n.bias.shape} != ({c},)")
        oh, ow = _conv_out_hw(shape[0], shape[1], kh, kw, n.stride, n.padding)
        if oh <= 0 or ow <= 0:
            fail(f"kernel {kh}x{kw} does not fit input {shape[:2]}")
        return (oh, ow, c), "hwc"
    if n.kind == "dense":
        (shape, layout), = in_shapes
        cin, cout = n.weights.shape
        if layout != "c" or shape != (cin,):
            fail(f"dense expects a flat ({cin},) input, got {shape} ({layout})")
        if n.bias is not None and n.bias.shape != (cout,):
            fail(f"bias shape {n.bias.shape} != ({cout},)")
        return (cout,), "c"
    if n.kind == "batch_norm":
        (shape, layout), = in_shapes
        c = shape[-1] if layout == "hwc" else shape[0]
        for name in ("gamma", "beta", "mean", "variance"):
            arr = getattr(n, name)
            if arr is None or arr.shape != (c,):
                fail(f"batch_norm {name} must have shape ({c},)")
        return shape, layout
    if n.kind == "activation":
        (shape, layout), = in_shapes
        if n.act.kind == "prelu":
            c = shape[-1] if layout == "hwc" else shape[0]
            if n.act.slopes.shape != (c,):
                fail(f"prelu slopes shape {n.act.slopes.shape} != ({c},)")
        return shape, layout
    if n.kind == "add":
        (s1, l1), (s2, l2) = in_shapes
        if s1 != s2 or l1 != l2:
            fail(f"add inputs differ: {s1} ({l1}) vs {s2} ({l2})")
        return s1, l1
    if n.kind == "global_avg_pool":
        (shape, layout), = in_shapes
        if layout != "hwc":
            fail("global_avg_pool expects an hwc input")
        return (1, 1, shape[2]), "hwc"
    if n.kind == "max_pool":
        (shape, layout), = in_shapes
        if layout != "hwc":
            fail("max_pool expects an hwc input")
        oh, ow = _conv_out_hw(shape[0], shape[1], n.pool, n.pool, n.stride, n.padding)
        if oh <= 0 or ow <= 0:
            fail(f"pool {n.pool} does not fit input {shape[:2]}")
        return (oh, ow, shape[2]), "hwc"
    if n.kind == "flatten":
        (shape, layout), = in_shapes
        return (int(np.prod(shape)),), "c"
    if n.kind == "softmax":
        (shape, layout), = in_shapes
        if layout != "c":
            fail("softmax expects a flat input")
        return shape, layout
    raise GraphError(f"node {n.id}: unsupported op {n.kind!r}", code="unsupported_op")


def replace_node(graph, node_id, **changes):
    """New graph with one node replaced (field-level copy)."""
    g = graph.copy()
    for i, n in enumerate(g.nodes):
        if n.id == node_id:
            g.nodes[i] = replace(n, **changes)
            return g
    raise GraphError(f"no node with id {node_id!r}", code="dangling_edge")
