"""Writer for the hptq container wire format.

Deliberately independent of the hptq package: the exporter speaks the format
(JSON manifest + binary blob, magic "HPTQ"), it does not reuse the reader's
code. Manifests are emitted canonically (sorted keys, two-space indent,
trailing newline) so a load/save round trip through the consumer is
byte-identical.
"""

import json
import os
import struct

import numpy as np

MAGIC = b"HPTQ"
VERSION = 1

DTYPE_F32 = 0
DTYPE_I8 = 1


def blob_path(manifest_path):
    stem, _ = os.path.splitext(str(manifest_path))
    return stem + ".bin"


def write_manifest(manifest, path):
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)


def write_blob(path, records):
    """records: ordered (name, np.ndarray) pairs; int8 arrays stay int8,
    everything else is written as little-endian float32."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name, arr in records:
            arr = np.asarray(arr)
            if arr.dtype == np.int8:
                code = DTYPE_I8
                payload = np.ascontiguousarray(arr)
            else:
                code = DTYPE_F32
                payload = np.ascontiguousarray(arr.astype("<f4"))
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", code))
            f.write(struct.pack("<I", payload.ndim))
            for d in payload.shape:
                f.write(struct.pack("<I", d))
            f.write(payload.tobytes())


def write_model(manifest_path, inputs, outputs, nodes, records):
    """nodes: list of manifest node dicts; records: ordered blob payloads."""
    manifest = {
        "format": "hptq-model",
        "version": VERSION,
        "blob": os.path.basename(blob_path(manifest_path)),
        "quantized": False,
        "inputs": inputs,
        "outputs": outputs,
        "input_quant": {},
        "nodes": nodes,
    }
    write_manifest(manifest, manifest_path)
    write_blob(blob_path(manifest_path), records)


def write_dataset(manifest_path, samples, layout, labels=None, meta=None):
    samples = np.asarray(samples)
    manifest = {
        "format": "hptq-dataset",
        "version": VERSION,
        "blob": os.path.basename(blob_path(manifest_path)),
        "sample_count": int(samples.shape[0]),
        "sample_shape": list(samples.shape[1:]),
        "layout": layout,
        "has_labels": labels is not None,
    }
    if meta:
        manifest["meta"] = meta
    records = [("samples", samples)]
    if labels is not None:
        records.append(("labels", np.asarray(labels, dtype=np.float64)))
    write_manifest(manifest, manifest_path)
    write_blob(blob_path(manifest_path), records)
