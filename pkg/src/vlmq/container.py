"""Directory-based tensor container.

Layout::

    <dir>/manifest.json   {"format": "vlmq-container/1", "meta": {...},
                           "tensors": [{name, shape, dtype, offset, length}, ...]}
    <dir>/data.bin        little-endian, row-major payloads, back to back

Output is byte-deterministic: tensors are written in the order given and the
manifest is serialized with sorted keys.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .calib import CalibrationBatch, CalibrationSample
from .errors import ContainerError
from .model import LINEARS, LayerWeights, ModelSpec

FORMAT = "vlmq-container/1"
DTYPES = {"f64": np.dtype("<f8"), "u8": np.dtype("u1"), "i32": np.dtype("<i4")}


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype.kind == "f":
        return "f64"
    if arr.dtype.kind in "iu":
        if arr.dtype == np.uint8:
            return "u8"
        return "i32"
    if arr.dtype.kind == "b":
        return "u8"
    raise ContainerError(f"unsupported dtype {arr.dtype}")


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_container(path, tensors: dict, meta: dict | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(path / "data.bin", "wb") as fh:
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            tag = _dtype_tag(arr)
            if tag == "i32" and arr.size and (arr.min() < -(2**31) or arr.max() >= 2**31):
                raise ContainerError(f"{name} does not fit in int32")
            payload = np.ascontiguousarray(arr.astype(DTYPES[tag])).tobytes()
            fh.write(payload)
            entries.append(
                {"name": name, "shape": list(arr.shape), "dtype": tag, "offset": offset, "length": len(payload)}
            )
            offset += len(payload)
    manifest = {"format": FORMAT, "meta": meta or {}, "tensors": entries}
    (path / "manifest.json").write_text(dumps_json(manifest))


def read_container(path) -> tuple[dict, dict]:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        blob = (path / "data.bin").read_bytes()
    except FileNotFoundError as exc:
        raise ContainerError(f"not a tensor container: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ContainerError(f"corrupt manifest in {path}") from exc
    if manifest.get("format") != FORMAT:
        raise ContainerError(f"unsupported container format {manifest.get('format')!r}")
    tensors = {}
    for e in manifest["tensors"]:
        dt = DTYPES.get(e["dtype"])
        if dt is None:
            raise ContainerError(f"unknown dtype tag {e['dtype']!r}")
        start, length = int(e["offset"]), int(e["length"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        if start + length > len(blob) or count * dt.itemsize != length:
            raise ContainerError(f"tensor {e['name']} is truncated or mis-sized")
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=start).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
    return tensors, manifest.get("meta", {})


def model_tensors(layers: list[LayerWeights]) -> dict:
    out = {}
    for l, w in enumerate(layers):
        for name in LINEARS + ("attn_norm", "ffn_norm"):
            out[f"layers.{l}.{name}"] = getattr(w, name)
    return out


def save_model(path, spec: ModelSpec, layers: list[LayerWeights], meta: dict | None = None) -> None:
    write_container(path, model_tensors(layers), {"kind": "model", "spec": spec.to_dict(), **(meta or {})})


def load_model(path) -> tuple[ModelSpec, list[LayerWeights]]:
    """Load FP or quantized model containers (quantized ones carry dequantized weights)."""
    tensors, meta = read_container(path)
    if "spec" not in meta:
        raise ContainerError(f"{path} has no model spec")
    spec = ModelSpec.from_dict(meta["spec"])
    layers = []
    for l in range(spec.num_layers):
        fields = {}
        for name in LINEARS + ("attn_norm", "ffn_norm"):
            key = f"layers.{l}.{name}"
            if key not in tensors:
                raise ContainerError(f"missing tensor {key}")
            fields[name] = tensors[key].astype(np.float64)
        w = LayerWeights(**fields)
        w.check(spec)
        layers.append(w)
    return spec, layers


def save_batch(path, batch: CalibrationBatch, meta: dict | None = None) -> None:
    tensors = {}
    for i, s in enumerate(batch.samples):
        tensors[f"samples.{i}.embeddings"] = s.embeddings
        tensors[f"samples.{i}.roles"] = s.roles.astype(np.uint8)
    write_container(path, tensors, {"kind": "calibration", "num_samples": len(batch), **(meta or {})})


def load_batch(path) -> CalibrationBatch:
    tensors, meta = read_container(path)
    if meta.get("kind") != "calibration":
        raise ContainerError(f"{path} is not a calibration container")
    samples = []
    for i in range(int(meta["num_samples"])):
        samples.append(
            CalibrationSample(tensors[f"samples.{i}.embeddings"], tensors[f"samples.{i}.roles"])
        )
    return CalibrationBatch(samples)


def ensure_parent(path) -> None:
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
