"""On-disk interchange formats.

Model directory::

    <dir>/manifest.json   graph, dtype, provenance, origin, tensor order
    <dir>/weights.bin     all tensors concatenated row-major, little-endian
                          float32, in manifest order (kernel before bias,
                          layers in graph order)

Dataset directory::

    <dir>/data.json       task, shapes, dtypes, counts
    <dir>/inputs.bin      float32 LE, row-major [N, ...]
    <dir>/labels.bin      int64 LE [N] (classification) or float32 LE [N, d]

Both manifests are canonical JSON (sorted keys, two-space indent, trailing
newline), so loading and re-saving reproduces the files byte for byte.
Writes are atomic: content goes to a temp file first, then is renamed in.
"""

from __future__ import annotations

import gzip
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .model import ACTIVATIONS, Dataset, FLOAT, LayerSpec, ModelError, ModelGraph, ModelInstance

MODEL_FORMAT = "ffnet-model/1"
DATASET_FORMAT = "ffnet-dataset/1"


class FormatError(ValueError):
    """Raised when an on-disk artifact is malformed."""


# ---------------------------------------------------------------------------
# atomic write helpers
# ---------------------------------------------------------------------------


def write_bytes_atomic(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def canonical_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8")


def write_json_atomic(path: str | Path, obj) -> None:
    write_bytes_atomic(path, canonical_json(obj))


# ---------------------------------------------------------------------------
# model manifest <-> graph
# ---------------------------------------------------------------------------


def _layer_to_json(spec: LayerSpec) -> dict:
    if spec.kind == "dense":
        return {
            "kind": "dense",
            "kernel_shape": list(spec.kernel_shape),
            "has_bias": spec.has_bias,
            "activation": spec.activation,
        }
    if spec.kind == "conv2d":
        return {
            "kind": "conv2d",
            "kernel_shape": list(spec.kernel_shape),
            "has_bias": spec.has_bias,
            "activation": spec.activation,
            "strides": list(spec.strides),
        }
    if spec.kind == "maxpool2d":
        return {"kind": "maxpool2d", "pool_size": list(spec.pool_size), "strides": list(spec.strides)}
    if spec.kind == "flatten":
        return {"kind": "flatten"}
    return {"kind": "activation", "activation": spec.activation}


def _require(mapping: dict, key: str, context: str):
    if not isinstance(mapping, dict) or key not in mapping:
        raise FormatError(f"malformed manifest: {context} is missing {key!r}")
    return mapping[key]


def _layer_from_json(obj: dict, index: int) -> LayerSpec:
    ctx = f"layer {index}"
    kind = _require(obj, "kind", ctx)
    try:
        if kind == "dense":
            return LayerSpec(
                "dense",
                kernel_shape=tuple(_require(obj, "kernel_shape", ctx)),
                has_bias=bool(obj.get("has_bias", True)),
                activation=obj.get("activation", "linear"),
            )
        if kind == "conv2d":
            return LayerSpec(
                "conv2d",
                kernel_shape=tuple(_require(obj, "kernel_shape", ctx)),
                has_bias=bool(obj.get("has_bias", True)),
                activation=obj.get("activation", "linear"),
                strides=tuple(obj.get("strides", (1, 1))),
            )
        if kind == "maxpool2d":
            pool = tuple(_require(obj, "pool_size", ctx))
            return LayerSpec("maxpool2d", pool_size=pool, strides=tuple(obj.get("strides", pool)))
        if kind == "flatten":
            return LayerSpec("flatten")
        if kind == "activation":
            return LayerSpec("activation", activation=_require(obj, "activation", ctx))
    except ModelError as exc:
        raise FormatError(f"malformed manifest: {ctx}: {exc}") from exc
    raise FormatError(f"malformed manifest: {ctx} has unknown kind {kind!r}")


def save_model(instance: ModelInstance, path: str | Path) -> None:
    """Write a model directory (manifest.json + weights.bin)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    graph = instance.graph
    manifest = {
        "format": MODEL_FORMAT,
        "dtype": "f32",
        "byte_order": "little",
        "task": graph.task,
        "input_shape": list(graph.input_shape),
        "layers": [_layer_to_json(s) for s in graph.layers],
        "tensors": [
            {"layer": i, "role": role, "shape": list(shape)}
            for i, role, shape in graph.tensor_slots()
        ],
        "provenance": instance.provenance,
        "origin": instance.origin,
    }
    blob = b"".join(np.ascontiguousarray(t, dtype="<f4").tobytes() for t in instance.tensors)
    write_json_atomic(path / "manifest.json", manifest)
    write_bytes_atomic(path / "weights.bin", blob)


def load_model(path: str | Path) -> ModelInstance:
    """Read a model directory written by :func:`save_model`."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    weights_path = path / "weights.bin"
    if not manifest_path.is_file():
        raise FormatError(f"malformed model dir: no manifest.json in {path}")
    if not weights_path.is_file():
        raise FormatError(f"malformed model dir: no weights.bin in {path}")
    try:
        manifest = json.loads(manifest_path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed manifest: not valid JSON ({exc})") from exc

    fmt = _require(manifest, "format", "manifest")
    if fmt != MODEL_FORMAT:
        raise FormatError(f"malformed manifest: unsupported format {fmt!r}")
    if manifest.get("dtype") != "f32":
        raise FormatError(f"malformed manifest: unsupported dtype {manifest.get('dtype')!r}")
    layers = _require(manifest, "layers", "manifest")
    if not isinstance(layers, list) or not layers:
        raise FormatError("malformed manifest: layers must be a non-empty list")
    try:
        graph = ModelGraph(
            layers=tuple(_layer_from_json(o, i) for i, o in enumerate(layers)),
            input_shape=tuple(_require(manifest, "input_shape", "manifest")),
            task=manifest.get("task", "classification"),
        )
    except ModelError as exc:
        raise FormatError(f"malformed manifest: {exc}") from exc

    slots = graph.tensor_slots()
    declared = manifest.get("tensors")
    if declared is not None:
        expect = [
            {"layer": i, "role": role, "shape": list(shape)} for i, role, shape in slots
        ]
        if declared != expect:
            raise FormatError("malformed manifest: tensor table does not match layer specs")

    blob = weights_path.read_bytes()
    need = sum(int(np.prod(shape)) for _, _, shape in slots) * 4
    if len(blob) != need:
        raise FormatError(
            f"weight blob length mismatch: expected {need} bytes for "
            f"{len(slots)} tensors, got {len(blob)}"
        )
    tensors = []
    offset = 0
    for layer_idx, role, shape in slots:
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += count * 4
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"non-finite values in layer {layer_idx} {role}")
        tensors.append(arr.astype(FLOAT))
    origin = manifest.get("origin", {})
    if not isinstance(origin, dict):
        raise FormatError("malformed manifest: origin must be an object")
    try:
        return ModelInstance(
            graph,
            tuple(tensors),
            provenance=manifest.get("provenance", "trained_original"),
            origin=origin,
        )
    except ModelError as exc:
        raise FormatError(f"malformed model: {exc}") from exc


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def save_dataset(data: Dataset, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": DATASET_FORMAT,
        "task": data.task,
        "name": data.name,
        "split": data.split,
        "n": data.n,
        "input_shape": list(data.inputs.shape[1:]),
        "inputs_dtype": "float32",
        "labels_dtype": "int64" if data.task == "classification" else "float32",
        "labels_shape": list(data.labels.shape[1:]),
    }
    if data.task == "classification":
        labels_blob = np.ascontiguousarray(data.labels, dtype="<i8").tobytes()
    else:
        labels_blob = np.ascontiguousarray(data.labels, dtype="<f4").tobytes()
    write_json_atomic(path / "data.json", meta)
    write_bytes_atomic(path / "inputs.bin", np.ascontiguousarray(data.inputs, dtype="<f4").tobytes())
    write_bytes_atomic(path / "labels.bin", labels_blob)


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    meta_path = path / "data.json"
    if not meta_path.is_file():
        raise FormatError(f"malformed dataset dir: no data.json in {path}")
    try:
        meta = json.loads(meta_path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed data.json: not valid JSON ({exc})") from exc
    fmt = _require(meta, "format", "data.json")
    if fmt != DATASET_FORMAT:
        raise FormatError(f"malformed data.json: unsupported format {fmt!r}")
    task = _require(meta, "task", "data.json")
    n = int(_require(meta, "n", "data.json"))
    input_shape = tuple(int(d) for d in _require(meta, "input_shape", "data.json"))

    inputs_blob = (path / "inputs.bin").read_bytes()
    labels_blob = (path / "labels.bin").read_bytes()
    need_inputs = n * int(np.prod(input_shape)) * 4
    if len(inputs_blob) != need_inputs:
        raise FormatError(
            f"inputs blob length mismatch: expected {need_inputs} bytes, got {len(inputs_blob)}"
        )
    inputs = np.frombuffer(inputs_blob, dtype="<f4").reshape((n,) + input_shape)
    if task == "classification":
        if len(labels_blob) != n * 8:
            raise FormatError(
                f"labels blob length mismatch: expected {n * 8} bytes, got {len(labels_blob)}"
            )
        labels = np.frombuffer(labels_blob, dtype="<i8").copy()
    else:
        labels_shape = tuple(int(d) for d in meta.get("labels_shape", [1]))
        need = n * int(np.prod(labels_shape)) * 4
        if len(labels_blob) != need:
            raise FormatError(
                f"labels blob length mismatch: expected {need} bytes, got {len(labels_blob)}"
            )
        labels = np.frombuffer(labels_blob, dtype="<f4").reshape((n,) + labels_shape)
    try:
        return Dataset(
            inputs,
            labels,
            task=task,
            name=meta.get("name", ""),
            split=meta.get("split", "custom"),
        )
    except ModelError as exc:
        raise FormatError(f"malformed dataset: {exc}") from exc


# ---------------------------------------------------------------------------
# IDX import (classic image/label archive layout, big-endian, optionally gz)
# ---------------------------------------------------------------------------

_IDX_DTYPES = {
    0x08: np.uint8,
    0x09: np.int8,
    0x0B: ">i2",
    0x0C: ">i4",
    0x0D: ">f4",
    0x0E: ">f8",
}


def _read_idx(path: str | Path) -> np.ndarray:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:  # type: ignore[operator]
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path.name}: truncated IDX header")
    zero1, zero2, dtype_code, ndim = struct.unpack(">BBBB", raw[:4])
    if zero1 != 0 or zero2 != 0:
        raise FormatError(f"{path.name}: bad IDX magic")
    if dtype_code not in _IDX_DTYPES:
        raise FormatError(f"{path.name}: unsupported IDX dtype 0x{dtype_code:02x}")
    if len(raw) < 4 + 4 * ndim:
        raise FormatError(f"{path.name}: truncated IDX dimension table")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    data = np.frombuffer(raw, dtype=_IDX_DTYPES[dtype_code], offset=4 + 4 * ndim)
    if data.size != int(np.prod(dims)):
        raise FormatError(
            f"{path.name}: payload has {data.size} items, header promises {int(np.prod(dims))}"
        )
    return data.reshape(dims)


def load_idx(
    images_path: str | Path,
    labels_path: str | Path,
    *,
    normalize: bool = True,
    name: str = "",
    split: str = "custom",
) -> Dataset:
    """Import an images + labels IDX pair as a classification dataset.

    Image values are scaled to [0, 1] when ``normalize`` is set and a
    trailing channel axis is added, giving inputs of shape [N, H, W, 1].
    """
    images = _read_idx(images_path)
    labels = _read_idx(labels_path)
    if images.ndim != 3:
        raise FormatError(f"expected [N, H, W] image tensor, got shape {images.shape}")
    if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
        raise FormatError(
            f"label count {labels.shape} does not match image count {images.shape[0]}"
        )
    x = images.astype(np.float32)
    if normalize:
        x = x / np.float32(255.0)
    x = x[..., None]
    return Dataset(x, labels.astype(np.int64), task="classification", name=name, split=split)
