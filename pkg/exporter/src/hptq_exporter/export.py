"""Keras model to hptq container conversion.

Walks the functional graph backwards from the model outputs via keras tensor
history, maps each supported layer onto a container node, and records golden
input/output pairs from the source framework for downstream validation.
Batch-normalization layers are exported as-is (folding is the consumer's
job). Zero-padding layers fold into the explicit padding of the convolution
or pooling layer that consumes them.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .container import write_dataset, write_model


class UnsupportedLayerError(Exception):
    pass


SUPPORTED = (
    "InputLayer",
    "Conv2D",
    "DepthwiseConv2D",
    "Dense",
    "BatchNormalization",
    "ReLU",
    "LeakyReLU",
    "PReLU",
    "Activation",
    "Softmax",
    "ZeroPadding2D",
    "MaxPooling2D",
    "GlobalAveragePooling2D",
    "Flatten",
    "Reshape",
    "Add",
    "Dropout",
)

ACTIVATION_NAMES = {
    "relu": "relu",
    "relu6": "relu6",
    "swish": "swish",
    "silu": "swish",
    "hard_silu": "hswish",
    "hard_swish": "hswish",
    "selu": "selu",
    "leaky_relu": "leaky_relu",
    "linear": "identity",
}


@dataclass
class ExportManifest:
    source: str
    op_mapping: dict
    unsupported: list
    files: dict
    golden_count: int

    def to_dict(self):
        return {
            "source": self.source,
            "op_mapping": {k: sorted(set(v)) for k, v in sorted(self.op_mapping.items())},
            "unsupported": self.unsupported,
            "files": self.files,
            "golden_count": self.golden_count,
        }


@dataclass
class _Converted:
    nodes: list = field(default_factory=list)
    records: list = field(default_factory=list)
    op_mapping: dict = field(default_factory=dict)


def _walk(model):
    """Layers that actually feed the outputs, in topological order, plus the
    tensor each op consumes."""
    import keras  # noqa: F401  (keras tensors carry the history we walk)

    seen = {}
    order = []

    def visit(tensor):
        op, node_index, _ = tensor._keras_history
        key = id(op)
        if key in seen:
            return seen[key]
        node = op._inbound_nodes[node_index]
        parents = [] if node.is_input else [visit(t) for t in node.input_tensors]
        entry = {"layer": op, "inputs": parents}
        seen[key] = entry
        order.append(entry)
        return entry

    for out in model.outputs:
        visit(out)
    return order


def _act_node(converted, name, output, source, kind, **attrs):
    act = {"kind": kind}
    act.update(attrs)
    converted.nodes.append(
        {"id": name, "kind": "activation", "inputs": [source], "output": output, "act": act}
    )


def _map_activation_name(fn_name, layer_name):
    if fn_name == "softmax":
        return "softmax"
    if fn_name not in ACTIVATION_NAMES:
        raise UnsupportedLayerError(f"layer {layer_name}: activation {fn_name!r} is not supported")
    return ACTIVATION_NAMES[fn_name]


def convert_model(model):
    """Returns (inputs, outputs, nodes, records, op_mapping)."""
    converted = _Converted()
    tensor_of = {}  # layer name -> tensor name carrying its output
    pending_pad = {}  # tensor name -> (top, bottom, left, right)
    inputs = []

    for entry in _walk(model):
        layer = entry["layer"]
        cls = type(layer).__name__
        name = layer.name
        converted.op_mapping.setdefault(cls, []).append(name)
        if cls not in SUPPORTED:
            raise UnsupportedLayerError(f"layer {name}: {cls} is not supported")
        srcs = [tensor_of[e["layer"].name] for e in entry["inputs"]]

        if cls == "InputLayer":
            shape = tuple(int(d) for d in layer.batch_shape[1:])
            if len(shape) != 3:
                raise UnsupportedLayerError(f"layer {name}: only h x w x c inputs are supported")
            inputs.append({"name": name, "shape": list(shape), "layout": "hwc"})
            tensor_of[name] = name
            continue

        if cls == "Dropout":
            tensor_of[name] = srcs[0]
            continue

        if cls == "ZeroPadding2D":
            (pt, pb), (pl, pr) = layer.padding
            pending_pad[name] = (int(pt), int(pb), int(pl), int(pr))
            tensor_of[name] = srcs[0]
            continue

        src = srcs[0] if srcs else None
        pad_override = None
        if entry["inputs"] and entry["inputs"][0]["layer"].name in pending_pad:
            pad_override = pending_pad[entry["inputs"][0]["layer"].name]
            if cls not in ("Conv2D", "DepthwiseConv2D", "MaxPooling2D"):
                raise UnsupportedLayerError(
                    f"layer {name}: zero padding can only precede a convolution or pooling layer"
                )

        if cls in ("Conv2D", "DepthwiseConv2D"):
            node, records, out_name = _convert_conv(layer, src, pad_override)
            converted.nodes.append(node)
            converted.records.extend(records)
            fused = getattr(layer.activation, "__name__", "linear")
            if fused != "linear":
                kind = _map_activation_name(fused, name)
                if kind == "softmax":
                    raise UnsupportedLayerError(f"layer {name}: fused softmax on a convolution")
                _act_node(converted, f"{name}_act", name, out_name, kind)
            tensor_of[name] = name
            continue

        if cls == "Dense":
            kernel = layer.kernel.numpy()
            node = {
                "id": name, "kind": "dense", "inputs": [src],
                "output": f"{name}_pre" if getattr(layer.activation, "__name__", "linear") != "linear" else name,
                "has_bias": layer.use_bias, "weight_shape": list(kernel.shape),
            }
            converted.nodes.append(node)
            converted.records.append((f"{name}.weight", kernel))
            if layer.use_bias:
                converted.records.append((f"{name}.bias", layer.bias.numpy()))
            fused = getattr(layer.activation, "__name__", "linear")
            if fused != "linear":
                kind = _map_activation_name(fused, name)
                if kind == "softmax":
                    converted.nodes.append(
                        {"id": f"{name}_act", "kind": "softmax", "inputs": [f"{name}_pre"], "output": name}
                    )
                else:
                    _act_node(converted, f"{name}_act", name, f"{name}_pre", kind)
            tensor_of[name] = name
            continue

        if cls == "BatchNormalization":
            if layer.axis not in (-1, 3, [3], (3,)) and layer.axis != [-1]:
                raise UnsupportedLayerError(f"layer {name}: batch norm must normalize the channel axis")
            converted.nodes.append(
                {"id": name, "kind": "batch_norm", "inputs": [src], "output": name,
                 "eps": float(layer.epsilon)}
            )
            c = layer.moving_mean.shape[0]
            gamma = layer.gamma.numpy() if layer.scale else np.ones(c, dtype=np.float32)
            beta = layer.beta.numpy() if layer.center else np.zeros(c, dtype=np.float32)
            converted.records.extend(
                [
                    (f"{name}.gamma", gamma),
                    (f"{name}.beta", beta),
                    (f"{name}.mean", layer.moving_mean.numpy()),
                    (f"{name}.variance", layer.moving_variance.numpy()),
                ]
            )
            tensor_of[name] = name
            continue

        if cls == "ReLU":
            if float(layer.negative_slope or 0.0) != 0.0 or float(layer.threshold or 0.0) != 0.0:
                raise UnsupportedLayerError(f"layer {name}: parametrized ReLU variants are not supported")
            if layer.max_value is None:
                _act_node(converted, name, name, src, "relu")
            else:
                _act_node(converted, name, name, src, "relu6", clip=float(layer.max_value))
            tensor_of[name] = name
            continue

        if cls == "LeakyReLU":
            _act_node(converted, name, name, src, "leaky_relu", slope=float(layer.negative_slope))
            tensor_of[name] = name
            continue

        if cls == "PReLU":
            alpha = layer.alpha.numpy()
            slopes = alpha.reshape(-1)
            if slopes.size != alpha.shape[-1]:
                raise UnsupportedLayerError(f"layer {name}: PReLU slopes must be shared per channel")
            converted.nodes.append(
                {"id": name, "kind": "activation", "inputs": [src], "output": name,
                 "act": {"kind": "prelu"}}
            )
            converted.records.append((f"{name}.slopes", slopes))
            tensor_of[name] = name
            continue

        if cls == "Activation":
            fn = getattr(layer.activation, "__name__", str(layer.activation))
            kind = _map_activation_name(fn, name)
            if kind == "softmax":
                converted.nodes.append(
                    {"id": name, "kind": "softmax", "inputs": [src], "output": name}
                )
            else:
                _act_node(converted, name, name, src, kind)
            tensor_of[name] = name
            continue

        if cls == "Softmax":
            converted.nodes.append({"id": name, "kind": "softmax", "inputs": [src], "output": name})
            tensor_of[name] = name
            continue

        if cls == "MaxPooling2D":
            ph, pw = layer.pool_size
            sh, sw = layer.strides
            if ph != pw or sh != sw:
                raise UnsupportedLayerError(f"layer {name}: non-square pooling is not supported")
            padding = list(pad_override) if pad_override else layer.padding
            converted.nodes.append(
                {"id": name, "kind": "max_pool", "inputs": [src], "output": name,
                 "pool": int(ph), "stride": int(sh), "padding": padding}
            )
            tensor_of[name] = name
            continue

        if cls == "GlobalAveragePooling2D":
            if getattr(layer, "keepdims", False):
                converted.nodes.append(
                    {"id": name, "kind": "global_avg_pool", "inputs": [src], "output": name}
                )
            else:
                converted.nodes.append(
                    {"id": f"{name}_pool", "kind": "global_avg_pool", "inputs": [src], "output": f"{name}_pool"}
                )
                converted.nodes.append(
                    {"id": name, "kind": "flatten", "inputs": [f"{name}_pool"], "output": name}
                )
            tensor_of[name] = name
            continue

        if cls in ("Flatten", "Reshape"):
            if cls == "Reshape" and len(layer.target_shape) != 1:
                raise UnsupportedLayerError(f"layer {name}: only flattening reshapes are supported")
            converted.nodes.append({"id": name, "kind": "flatten", "inputs": [src], "output": name})
            tensor_of[name] = name
            continue

        if cls == "Add":
            converted.nodes.append({"id": name, "kind": "add", "inputs": list(srcs), "output": name})
            tensor_of[name] = name
            continue

        raise UnsupportedLayerError(f"layer {name}: {cls} is not supported")

    outputs = [tensor_of[t._keras_history[0].name] for t in model.outputs]
    return inputs, outputs, converted


def _convert_conv(layer, src, pad_override):
    cls = type(layer).__name__
    name = layer.name
    sh, sw = layer.strides
    if sh != sw:
        raise UnsupportedLayerError(f"layer {name}: non-uniform strides are not supported")
    if cls == "DepthwiseConv2D":
        if layer.depth_multiplier != 1:
            raise UnsupportedLayerError(f"layer {name}: depth multiplier must be 1")
        kernel = layer.kernel.numpy()  # kh, kw, c, 1
        kind = "depthwise_conv2d"
    else:
        if layer.groups != 1:
            raise UnsupportedLayerError(f"layer {name}: grouped convolutions are not supported")
        if tuple(layer.dilation_rate) != (1, 1):
            raise UnsupportedLayerError(f"layer {name}: dilation is not supported")
        kernel = layer.kernel.numpy()
        kind = "conv2d"
    if pad_override is not None:
        if layer.padding != "valid":
            raise UnsupportedLayerError(f"layer {name}: explicit padding requires valid conv padding")
        padding = list(pad_override)
    else:
        padding = layer.padding
    fused = getattr(layer.activation, "__name__", "linear")
    out_name = f"{name}_pre" if fused != "linear" else name
    node = {
        "id": name, "kind": kind, "inputs": [src], "output": out_name,
        "stride": int(sh), "padding": padding,
        "has_bias": layer.use_bias, "weight_shape": list(kernel.shape),
    }
    records = [(f"{name}.weight", kernel)]
    if layer.use_bias:
        records.append((f"{name}.bias", layer.bias.numpy()))
    return node, records, out_name


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------


def build_source(arch, weights=None, input_size=None):
    """Instantiate a named architecture or load a saved Keras model."""
    import keras

    if os.path.exists(arch):
        return keras.models.load_model(arch, compile=False), os.path.basename(arch)
    if arch == "mobilenet_v1":
        shape = tuple(input_size or (224, 224)) + (3,)
        model = keras.applications.MobileNet(
            input_shape=shape, weights=weights, alpha=0.25 if weights is None else 1.0
        )
        return model, f"mobilenet_v1[{shape[0]}x{shape[1]}]"
    if arch == "resnet50":
        shape = tuple(input_size or (224, 224)) + (3,)
        model = keras.applications.ResNet50(input_shape=shape, weights=weights)
        return model, f"resnet50[{shape[0]}x{shape[1]}]"
    raise UnsupportedLayerError(f"unknown architecture {arch!r} (expected mobilenet_v1, resnet50 or a model path)")


def export_model(model, out_dir, source="keras-model", golden_count=8, seed=0) -> ExportManifest:
    """Write model.json/.bin plus golden input/output containers."""
    os.makedirs(out_dir, exist_ok=True)
    inputs, outputs, converted = convert_model(model)

    model_path = os.path.join(out_dir, "model.json")
    write_model(model_path, inputs, outputs, converted.nodes, converted.records)

    rng = np.random.default_rng(seed)
    shape = tuple(inputs[0]["shape"])
    golden_in = rng.normal(size=(golden_count, *shape)).astype(np.float32)
    golden_out = model.predict(golden_in, verbose=0)
    write_dataset(os.path.join(out_dir, "goldens_in.json"), golden_in, layout="hwc")
    write_dataset(os.path.join(out_dir, "goldens_out.json"), golden_out, layout="c")

    manifest = ExportManifest(
        source=source,
        op_mapping=converted.op_mapping,
        unsupported=[],
        files={
            "model": "model.json",
            "goldens_in": "goldens_in.json",
            "goldens_out": "goldens_out.json",
        },
        golden_count=golden_count,
    )
    with open(os.path.join(out_dir, "export_manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest
