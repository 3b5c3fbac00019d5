"""Model and dataset containers.

A container is a pair of files: a human-diffable JSON manifest describing
topology and attributes, and a binary blob holding tensor payloads. The blob
layout is:

    magic "HPTQ" | version u32 LE | record*
    record = name_len u32 LE | name UTF-8 | dtype u32 LE | rank u32 LE
             | dims u32 LE * rank | raw row-major payload

dtype 0 is 32-bit LE IEEE float, dtype 1 is 8-bit signed integer. Quantized
weights are stored as int8 codes with per-channel threshold exponents in the
manifest; activation quantizers are manifest attributes.

The manifest is emitted canonically (sorted keys, two-space indent) so that
load followed by save is byte-identical.
"""

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContainerError
from .graph import Activation, Graph, GraphInput, Node
from .quantizers import QuantSpec, round_half_away
from .tensor import Tensor

MAGIC = b"HPTQ"
VERSION = 1

DTYPE_F32 = 0
DTYPE_I8 = 1
_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_I8: np.dtype("i1")}


@dataclass
class CalibrationSet:
    """Representative input samples, optionally labelled."""

    samples: list
    labels: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.samples) < 1:
            raise ContainerError("calibration set empty", code="bad_manifest")
        first = self.samples[0].dims
        for s in self.samples:
            if s.dims != first:
                raise ContainerError("samples disagree on shape", code="bad_manifest")
        if self.labels is not None and len(self.labels) != len(self.samples):
            raise ContainerError("label/sample count mismatch", code="bad_manifest")

    @property
    def n_samples(self):
        return len(self.samples)


# ---------------------------------------------------------------------------
# Blob records
# ---------------------------------------------------------------------------


def write_blob(path, records):
    """records: list of (name, np.ndarray) pairs; dtype picked from array."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name, arr in records:
            if arr.dtype == np.int8:
                code = DTYPE_I8
            else:
                code = DTYPE_F32
                arr = arr.astype("<f4")
            payload = np.ascontiguousarray(arr)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", code))
            f.write(struct.pack("<I", payload.ndim))
            for d in payload.shape:
                f.write(struct.pack("<I", d))
            f.write(payload.tobytes())


def read_blob(path):
    """Returns name -> np.ndarray (float32 arrays widened to float64)."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise ContainerError(f"bad magic {data[:4]!r} in {path}", code="bad_magic")
    if len(data) < 8:
        raise ContainerError("unexpected end of container", code="truncated")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise ContainerError(f"container version {version} unsupported (expected {VERSION})", code="version_mismatch")
    pos = 8
    out = {}

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise ContainerError("unexpected end of container", code="truncated")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    while pos < len(data):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (code,) = struct.unpack("<I", take(4))
        if code not in _DTYPES:
            raise ContainerError(f"unknown dtype code {code} for record {name!r}", code="bad_dtype")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dtype = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        raw = take(nbytes)
        arr = np.frombuffer(raw, dtype=dtype).reshape(dims)
        out[name] = arr.astype(np.float64) if code == DTYPE_F32 else arr.copy()
    return out


def _blob_path(manifest_path):
    stem, _ = os.path.splitext(manifest_path)
    return stem + ".bin"


def _write_manifest(manifest, path):
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)


def _read_manifest(path, expected_format):
    try:
        with open(path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise ContainerError(f"manifest {path} is not valid JSON: {e}", code="bad_manifest")
    if manifest.get("format") != expected_format:
        raise ContainerError(
            f"manifest format {manifest.get('format')!r}, expected {expected_format!r}", code="bad_manifest"
        )
    if manifest.get("version") != VERSION:
        raise ContainerError(
            f"manifest version {manifest.get('version')} unsupported (expected {VERSION})",
            code="version_mismatch",
        )
    return manifest


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


def _node_records(node, quantized):
    records = []
    if node.is_linear:
        if quantized:
            if node.weight_bits > 8:
                raise ContainerError(
                    f"int8 container cannot store {node.weight_bits}-bit weight codes", code="bad_dtype"
                )
            codes = _weight_codes(node)
            records.append((f"{node.id}.weight_int", codes.astype(np.int8)))
        else:
            records.append((f"{node.id}.weight", node.weights))
        if node.bias is not None:
            records.append((f"{node.id}.bias", node.bias))
    elif node.kind == "batch_norm":
        for name in ("gamma", "beta", "mean", "variance"):
            records.append((f"{node.id}.{name}", getattr(node, name)))
    elif node.kind == "activation":
        if node.act.kind == "prelu":
            records.append((f"{node.id}.slopes", node.act.slopes))
        if node.act.kind == "relu6" and np.ndim(node.act.clip) > 0:
            records.append((f"{node.id}.clip", np.asarray(node.act.clip)))
    if node.descale is not None:
        records.append((f"{node.id}.descale", node.descale))
    return records


def weight_step_sizes(node):
    """Per-output-channel step size (always the signed grid)."""
    exps = np.asarray(node.weight_exponents, dtype=np.int64)
    return np.ldexp(1.0, exps + 1 - node.weight_bits)


def _weight_codes(node):
    if node.weight_exponents is None or node.weight_bits is None:
        raise ContainerError("missing quantization parameters", code="missing_quant_params")
    axis = node.weight_channel_axis()
    steps = weight_step_sizes(node)
    shape = [1] * node.weights.ndim
    shape[axis] = -1
    s = steps.reshape(shape)
    lo = -(2 ** (node.weight_bits - 1))
    hi = 2 ** (node.weight_bits - 1) - 1
    return np.clip(round_half_away(node.weights / s), lo, hi)


def quantized_weights(node):
    """Dequantized weight array implied by the node's integer codes."""
    axis = node.weight_channel_axis()
    steps = weight_step_sizes(node)
    shape = [1] * node.weights.ndim
    shape[axis] = -1
    return _weight_codes(node) * steps.reshape(shape)


def _node_manifest(node, quantized):
    entry = {"id": node.id, "kind": node.kind, "inputs": list(node.inputs), "output": node.output}
    if node.kind in ("conv2d", "depthwise_conv2d"):
        entry["stride"] = node.stride
        entry["padding"] = node.padding if isinstance(node.padding, str) else list(node.padding)
        if node.pad_value:
            entry["pad_value"] = float(node.pad_value)
    if node.kind == "max_pool":
        entry["pool"] = node.pool
        entry["stride"] = node.stride
        entry["padding"] = node.padding if isinstance(node.padding, str) else list(node.padding)
    if node.is_linear:
        entry["has_bias"] = node.bias is not None
        entry["weight_shape"] = list(node.weights.shape)
        if quantized:
            entry["weight_bits"] = int(node.weight_bits)
            entry["weight_exponents"] = [int(e) for e in node.weight_exponents]
    if node.kind == "batch_norm":
        entry["eps"] = float(node.eps)
    if node.kind == "activation":
        entry["act"] = node.act.to_dict()
        if node.act.kind == "relu6" and np.ndim(node.act.clip) > 0:
            entry["act"]["clip"] = "blob"
    if node.out_quant is not None:
        entry["out_quant"] = node.out_quant.to_dict()
    if node.descale is not None:
        entry["descale"] = "blob"
    return entry


def _save_graph(graph, path, quantized):
    graph.validate()
    if quantized:
        graph.assert_fully_quantized()
    blob = _blob_path(path)
    manifest = {
        "format": "hptq-model",
        "version": VERSION,
        "blob": os.path.basename(blob),
        "quantized": quantized,
        "inputs": [{"name": i.name, "shape": list(i.shape), "layout": i.layout} for i in graph.inputs],
        "outputs": list(graph.outputs),
        "input_quant": {k: v.to_dict() for k, v in graph.input_quant.items()},
        "nodes": [_node_manifest(n, quantized) for n in graph.nodes],
    }
    records = []
    for n in graph.nodes:
        records.extend(_node_records(n, quantized))
    _write_manifest(manifest, path)
    write_blob(blob, records)


def save_model(graph: Graph, path):
    """Write a float model container (weights as float32)."""
    _save_graph(graph, path, quantized=False)


def save_quantized(graph: Graph, path):
    """Write a quantized model container (int8 weight codes + exponents).

    Rejects graphs with unfilled quantization slots.
    """
    try:
        graph.assert_fully_quantized()
    except Exception as e:
        raise ContainerError(f"missing quantization parameters: {e}", code="missing_quant_params")
    _save_graph(graph, path, quantized=True)


def load_model(path) -> Graph:
    manifest = _read_manifest(path, "hptq-model")
    blob = read_blob(os.path.join(os.path.dirname(path) or ".", manifest["blob"]))
    quantized = manifest.get("quantized", False)
    nodes = []
    for entry in manifest["nodes"]:
        node = Node(id=entry["id"], kind=entry["kind"], inputs=list(entry["inputs"]), output=entry["output"])
        kind = entry["kind"]
        if kind in ("conv2d", "depthwise_conv2d", "max_pool"):
            node.stride = int(entry.get("stride", 1))
            pad = entry.get("padding", "valid")
            node.padding = pad if isinstance(pad, str) else tuple(int(v) for v in pad)
            node.pad_value = float(entry.get("pad_value", 0.0))
        if kind == "max_pool":
            node.pool = int(entry["pool"])
        if kind in ("conv2d", "depthwise_conv2d", "dense"):
            if quantized:
                node.weight_bits = int(entry["weight_bits"])
                node.weight_exponents = np.asarray(entry["weight_exponents"], dtype=np.int64)
                codes = _require(blob, f"{entry['id']}.weight_int", path)
                spec_shape = tuple(entry["weight_shape"])
                if tuple(codes.shape) != spec_shape:
                    raise ContainerError(
                        f"node {entry['id']}: weight codes shape {codes.shape} != declared {spec_shape}",
                        code="bad_manifest",
                    )
                axis = 3 if kind == "conv2d" else (2 if kind == "depthwise_conv2d" else 1)
                steps = np.ldexp(1.0, node.weight_exponents + 1 - node.weight_bits)
                shape = [1] * codes.ndim
                shape[axis] = -1
                node.weights = codes.astype(np.float64) * steps.reshape(shape)
            else:
                node.weights = _require(blob, f"{entry['id']}.weight", path)
            if entry.get("has_bias", False):
                node.bias = _require(blob, f"{entry['id']}.bias", path)
        if kind == "batch_norm":
            node.eps = float(entry.get("eps", 1e-3))
            for name in ("gamma", "beta", "mean", "variance"):
                setattr(node, name, _require(blob, f"{entry['id']}.{name}", path))
        if kind == "activation":
            a = entry["act"]
            act = Activation(kind=a["kind"])
            if "slope" in a:
                act.slope = float(a["slope"])
            if a["kind"] == "prelu":
                act.slopes = _require(blob, f"{entry['id']}.slopes", path)
            if a.get("clip") == "blob":
                act.clip = _require(blob, f"{entry['id']}.clip", path)
            elif "clip" in a:
                act.clip = float(a["clip"])
            act.shift = float(a.get("shift", 0.0))
            node.act = act
        if entry.get("out_quant"):
            node.out_quant = QuantSpec.from_dict(entry["out_quant"])
        if entry.get("descale") == "blob":
            node.descale = _require(blob, f"{entry['id']}.descale", path)
        nodes.append(node)
    graph = Graph(
        nodes=nodes,
        inputs=[GraphInput(i["name"], tuple(i["shape"]), i.get("layout", "hwc")) for i in manifest["inputs"]],
        outputs=list(manifest["outputs"]),
        input_quant={k: QuantSpec.from_dict(v) for k, v in manifest.get("input_quant", {}).items()},
    )
    graph.validate()
    return graph


def _require(blob, name, path):
    if name not in blob:
        raise ContainerError(f"record {name!r} missing from blob of {path}", code="truncated")
    return blob[name]


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def save_dataset(calib: CalibrationSet, path):
    blob = _blob_path(path)
    stacked = np.stack([s.array for s in calib.samples])
    manifest = {
        "format": "hptq-dataset",
        "version": VERSION,
        "blob": os.path.basename(blob),
        "sample_count": calib.n_samples,
        "sample_shape": list(calib.samples[0].dims),
        "layout": calib.samples[0].layout,
        "has_labels": calib.labels is not None,
    }
    if calib.meta:
        manifest["meta"] = calib.meta
    records = [("samples", stacked)]
    if calib.labels is not None:
        records.append(("labels", np.asarray(calib.labels, dtype=np.float64)))
    _write_manifest(manifest, path)
    write_blob(blob, records)


def load_dataset(path) -> CalibrationSet:
    manifest = _read_manifest(path, "hptq-dataset")
    blob = read_blob(os.path.join(os.path.dirname(path) or ".", manifest["blob"]))
    stacked = _require(blob, "samples", path)
    if stacked.shape[0] != manifest["sample_count"]:
        raise ContainerError(
            f"blob holds {stacked.shape[0]} samples, manifest declares {manifest['sample_count']}",
            code="bad_manifest",
        )
    layout = manifest.get("layout", "hwc")
    samples = [Tensor.from_array(stacked[i], layout=layout) for i in range(stacked.shape[0])]
    labels = None
    if manifest.get("has_labels"):
        labels = _require(blob, "labels", path).astype(np.int64)
    return CalibrationSet(samples=samples, labels=labels, meta=manifest.get("meta", {}))
