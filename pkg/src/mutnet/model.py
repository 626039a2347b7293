"""Feedforward network representation and batched inference.

A network is described by an immutable :class:`ModelGraph` (layer specs plus
input shape) and realized by a :class:`ModelInstance` that binds one float32
tensor per parameter slot.  The forward pass is a pure function of
``(instance, batch)``: no hidden state, no global RNG.

Layout conventions (shared with the on-disk interchange format):

* batches are channels-last: ``[B, H, W, C]`` for images, ``[B, n]`` for flat
  vectors;
* dense kernels are ``[fan_in, fan_out]``;
* conv kernels are ``[kh, kw, in_ch, out_ch]``;
* flattening is row-major (C order).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

LAYER_KINDS = ("dense", "conv2d", "maxpool2d", "flatten", "activation")
ACTIVATIONS = ("linear", "relu", "sigmoid", "tanh", "softmax")
TASKS = ("classification", "regression")

FLOAT = np.float32


class ModelError(ValueError):
    """Raised for malformed graphs, shape mismatches or bad tensors."""


# ---------------------------------------------------------------------------
# graph description
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a feedforward stack.

    Only the fields relevant to ``kind`` are consulted:

    ==========  =====================================================
    dense       kernel_shape=(fan_in, fan_out), has_bias, activation
    conv2d      kernel_shape=(kh, kw, in_ch, out_ch), has_bias,
                activation, strides  (valid padding only)
    maxpool2d   pool_size, strides
    flatten     (none)
    activation  activation
    ==========  =====================================================
    """

    kind: str
    kernel_shape: tuple[int, ...] = ()
    has_bias: bool = True
    activation: str = "linear"
    strides: tuple[int, int] = (1, 1)
    pool_size: tuple[int, int] = (2, 2)

    def __post_init__(self) -> None:
        object.__setattr__(self, "kernel_shape", tuple(int(d) for d in self.kernel_shape))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        object.__setattr__(self, "pool_size", tuple(int(p) for p in self.pool_size))
        if self.kind not in LAYER_KINDS:
            raise ModelError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ModelError(f"unknown activation {self.activation!r}")
        if self.kind == "dense":
            if len(self.kernel_shape) != 2 or min(self.kernel_shape) < 1:
                raise ModelError(f"dense kernel_shape must be (fan_in, fan_out), got {self.kernel_shape}")
        elif self.kind == "conv2d":
            if len(self.kernel_shape) != 4 or min(self.kernel_shape) < 1:
                raise ModelError(
                    f"conv2d kernel_shape must be (kh, kw, in_ch, out_ch), got {self.kernel_shape}"
                )
            if len(self.strides) != 2 or min(self.strides) < 1:
                raise ModelError(f"conv2d strides must be two positive ints, got {self.strides}")
        elif self.kind == "maxpool2d":
            if len(self.pool_size) != 2 or min(self.pool_size) < 1:
                raise ModelError(f"maxpool2d pool_size must be two positive ints, got {self.pool_size}")
            if len(self.strides) != 2 or min(self.strides) < 1:
                raise ModelError(f"maxpool2d strides must be two positive ints, got {self.strides}")

    @property
    def is_parametric(self) -> bool:
        return self.kind in ("dense", "conv2d")

    @property
    def units(self) -> int:
        """Number of neurons this layer produces (its output channel count)."""
        if not self.is_parametric:
            raise ModelError(f"{self.kind} layer has no neurons")
        return self.kernel_shape[-1]


def dense(fan_in: int, fan_out: int, activation: str = "linear", bias: bool = True) -> LayerSpec:
    return LayerSpec("dense", kernel_shape=(fan_in, fan_out), has_bias=bias, activation=activation)


def conv2d(
    kh: int,
    kw: int,
    in_ch: int,
    out_ch: int,
    activation: str = "linear",
    strides: tuple[int, int] = (1, 1),
    bias: bool = True,
) -> LayerSpec:
    return LayerSpec(
        "conv2d",
        kernel_shape=(kh, kw, in_ch, out_ch),
        has_bias=bias,
        activation=activation,
        strides=strides,
    )


def maxpool2d(pool_size: tuple[int, int] = (2, 2), strides: tuple[int, int] | None = None) -> LayerSpec:
    if strides is None:
        strides = pool_size
    return LayerSpec("maxpool2d", pool_size=pool_size, strides=strides)


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def activation(name: str) -> LayerSpec:
    return LayerSpec("activation", activation=name)


def _layer_output_shape(spec: LayerSpec, in_shape: tuple[int, ...], index: int) -> tuple[int, ...]:
    if spec.kind == "dense":
        fan_in, fan_out = spec.kernel_shape
        if len(in_shape) != 1 or in_shape[0] != fan_in:
            raise ModelError(
                f"layer {index}: dense expects flat input of size {fan_in}, got shape {in_shape}"
            )
        return (fan_out,)
    if spec.kind == "conv2d":
        kh, kw, in_ch, out_ch = spec.kernel_shape
        if len(in_shape) != 3:
            raise ModelError(f"layer {index}: conv2d expects (H, W, C) input, got shape {in_shape}")
        h, w, c = in_shape
        if c != in_ch:
            raise ModelError(f"layer {index}: conv2d expects {in_ch} input channels, got {c}")
        sh, sw = spec.strides
        if h < kh or w < kw:
            raise ModelError(f"layer {index}: conv2d kernel {kh}x{kw} larger than input {h}x{w}")
        return ((h - kh) // sh + 1, (w - kw) // sw + 1, out_ch)
    if spec.kind == "maxpool2d":
        if len(in_shape) != 3:
            raise ModelError(f"layer {index}: maxpool2d expects (H, W, C) input, got shape {in_shape}")
        h, w, c = in_shape
        ph, pw = spec.pool_size
        sh, sw = spec.strides
        if h < ph or w < pw:
            raise ModelError(f"layer {index}: pool window {ph}x{pw} larger than input {h}x{w}")
        return ((h - ph) // sh + 1, (w - pw) // sw + 1, c)
    if spec.kind == "flatten":
        return (int(np.prod(in_shape)),)
    # activation-only layer
    return in_shape


@dataclass(frozen=True)
class ModelGraph:
    """Immutable layer stack with a fixed input shape and task tag."""

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    task: str = "classification"

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if self.task not in TASKS:
            raise ModelError(f"unknown task {self.task!r}")
        if not self.layers:
            raise ModelError("graph needs at least one layer")
        if not self.input_shape or min(self.input_shape) < 1:
            raise ModelError(f"bad input shape {self.input_shape}")

        shapes = []
        cur = self.input_shape
        for i, spec in enumerate(self.layers):
            cur = _layer_output_shape(spec, cur, i)
            shapes.append(cur)
        if len(shapes[-1]) != 1:
            raise ModelError(f"final output must be flat, got shape {shapes[-1]}")
        if self.task == "classification":
            final_act = self.layers[-1].activation
            if final_act not in ("softmax", "linear"):
                raise ModelError(
                    f"classification output layer must be softmax or linear, got {final_act!r}"
                )
        object.__setattr__(self, "_shapes", tuple(shapes))

    # -- shape bookkeeping --------------------------------------------------

    @property
    def output_shapes(self) -> tuple[tuple[int, ...], ...]:
        """Shape after each layer, in layer order."""
        return self._shapes  # type: ignore[attr-defined]

    def input_shape_of(self, index: int) -> tuple[int, ...]:
        return self.input_shape if index == 0 else self.output_shapes[index - 1]

    @property
    def out_dim(self) -> int:
        return self.output_shapes[-1][0]

    @property
    def parametric_indices(self) -> tuple[int, ...]:
        return tuple(i for i, s in enumerate(self.layers) if s.is_parametric)

    def tensor_slots(self) -> tuple[tuple[int, str, tuple[int, ...]], ...]:
        """Parameter slots as (layer_index, role, shape), in storage order.

        Storage order is layer order with each layer's kernel preceding its
        bias; this is also the order of tensors inside a ModelInstance and
        the concatenation order of the on-disk weight blob.
        """
        slots: list[tuple[int, str, tuple[int, ...]]] = []
        for i in self.parametric_indices:
            spec = self.layers[i]
            slots.append((i, "kernel", spec.kernel_shape))
            if spec.has_bias:
                slots.append((i, "bias", (spec.units,)))
        return tuple(slots)

    @property
    def n_params(self) -> int:
        return int(sum(np.prod(shape) for _, _, shape in self.tensor_slots()))


# ---------------------------------------------------------------------------
# parameter binding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelInstance:
    """A graph with concrete float32 parameters.

    ``provenance`` distinguishes trained originals from operator output;
    ``origin`` records how the instance was produced (operator name, seed,
    parameter values) and travels with the instance through save/load.
    """

    graph: ModelGraph
    tensors: tuple[np.ndarray, ...]
    provenance: str = "trained_original"
    origin: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        slots = self.graph.tensor_slots()
        tensors = tuple(self.tensors)
        if len(tensors) != len(slots):
            raise ModelError(f"expected {len(slots)} tensors, got {len(tensors)}")
        frozen = []
        for t, (layer_idx, role, shape) in zip(tensors, slots):
            arr = np.array(t, dtype=FLOAT, order="C", copy=True)
            if arr.shape != shape:
                raise ModelError(
                    f"layer {layer_idx} {role}: expected shape {shape}, got {arr.shape}"
                )
            if not np.all(np.isfinite(arr)):
                raise ModelError(f"layer {layer_idx} {role}: non-finite values")
            arr.flags.writeable = False
            frozen.append(arr)
        object.__setattr__(self, "tensors", tuple(frozen))
        if self.provenance not in ("trained_original", "mutant"):
            raise ModelError(f"unknown provenance {self.provenance!r}")

    def layer_tensors(self, layer_index: int) -> tuple[np.ndarray, np.ndarray | None]:
        """(kernel, bias) of the parametric layer at ``layer_index``."""
        out_k = out_b = None
        for t, (i, role, _) in zip(self.tensors, self.graph.tensor_slots()):
            if i == layer_index:
                if role == "kernel":
                    out_k = t
                else:
                    out_b = t
        if out_k is None:
            raise ModelError(f"layer {layer_index} is not parametric")
        return out_k, out_b

    def replace_tensors(
        self, tensors: Sequence[np.ndarray], provenance: str, origin: dict
    ) -> "ModelInstance":
        return ModelInstance(self.graph, tuple(tensors), provenance=provenance, origin=origin)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def apply_activation(name: str, x: np.ndarray) -> np.ndarray:
    if name == "linear":
        return x
    if name == "relu":
        return np.maximum(x, FLOAT(0))
    if name == "sigmoid":
        return FLOAT(1) / (FLOAT(1) + np.exp(-x))
    if name == "tanh":
        return np.tanh(x)
    if name == "softmax":
        return _softmax(x)
    raise ModelError(f"unknown activation {name!r}")


def _conv2d_patches(x: np.ndarray, kh: int, kw: int, strides: tuple[int, int]) -> np.ndarray:
    """Strided view of all valid kh x kw patches: [B, OH, OW, kh, kw, C]."""
    sh, sw = strides
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    # windows: [B, H-kh+1, W-kw+1, C, kh, kw]
    windows = windows[:, ::sh, ::sw]
    return np.moveaxis(windows, 3, 5)  # -> [B, OH, OW, kh, kw, C]


def _conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None, strides) -> np.ndarray:
    kh, kw, in_ch, out_ch = kernel.shape
    patches = _conv2d_patches(x, kh, kw, strides)
    b, oh, ow = patches.shape[:3]
    cols = patches.reshape(b * oh * ow, kh * kw * in_ch)
    out = cols @ kernel.reshape(kh * kw * in_ch, out_ch)
    if bias is not None:
        out = out + bias
    return out.reshape(b, oh, ow, out_ch)


def _maxpool2d(x: np.ndarray, pool: tuple[int, int], strides: tuple[int, int]) -> np.ndarray:
    ph, pw = pool
    sh, sw = strides
    windows = np.lib.stride_tricks.sliding_window_view(x, (ph, pw), axis=(1, 2))
    windows = windows[:, ::sh, ::sw]  # [B, OH, OW, C, ph, pw]
    return windows.max(axis=(4, 5))


def _check_batch(graph: ModelGraph, batch: np.ndarray) -> np.ndarray:
    x = np.asarray(batch, dtype=FLOAT)
    if x.ndim != len(graph.input_shape) + 1 or x.shape[1:] != graph.input_shape:
        raise ModelError(
            f"batch shape {x.shape} does not match input shape (B, {', '.join(map(str, graph.input_shape))})"
        )
    return x


def forward(instance: ModelInstance, batch: np.ndarray) -> np.ndarray:
    """Run the network on a batch; returns float32 [B, out_dim]."""
    x = _check_batch(instance.graph, batch)
    for i, spec in enumerate(instance.graph.layers):
        if spec.kind == "dense":
            kernel, bias = instance.layer_tensors(i)
            x = x @ kernel
            if bias is not None:
                x = x + bias
            x = apply_activation(spec.activation, x)
        elif spec.kind == "conv2d":
            kernel, bias = instance.layer_tensors(i)
            x = _conv2d(x, kernel, bias, spec.strides)
            x = apply_activation(spec.activation, x)
        elif spec.kind == "maxpool2d":
            x = _maxpool2d(x, spec.pool_size, spec.strides)
        elif spec.kind == "flatten":
            x = x.reshape(x.shape[0], -1)
        else:  # activation
            x = apply_activation(spec.activation, x)
    return np.ascontiguousarray(x, dtype=FLOAT)


def forward_activations(
    instance: ModelInstance, batch: np.ndarray, layer_indices: Iterable[int]
) -> dict[int, np.ndarray]:
    """Post-activation outputs of selected layers, keyed by layer index."""
    wanted = set(int(i) for i in layer_indices)
    bad = [i for i in wanted if not 0 <= i < len(instance.graph.layers)]
    if bad:
        raise ModelError(f"no such layer: {sorted(bad)}")
    x = _check_batch(instance.graph, batch)
    grabbed: dict[int, np.ndarray] = {}
    for i, spec in enumerate(instance.graph.layers):
        if spec.kind == "dense":
            kernel, bias = instance.layer_tensors(i)
            x = x @ kernel
            if bias is not None:
                x = x + bias
            x = apply_activation(spec.activation, x)
        elif spec.kind == "conv2d":
            kernel, bias = instance.layer_tensors(i)
            x = _conv2d(x, kernel, bias, spec.strides)
            x = apply_activation(spec.activation, x)
        elif spec.kind == "maxpool2d":
            x = _maxpool2d(x, spec.pool_size, spec.strides)
        elif spec.kind == "flatten":
            x = x.reshape(x.shape[0], -1)
        else:
            x = apply_activation(spec.activation, x)
        if i in wanted:
            grabbed[i] = np.ascontiguousarray(x, dtype=FLOAT)
    return grabbed


# ---------------------------------------------------------------------------
# datasets and correctness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """Inputs plus ground truth for one evaluation split.

    Classification labels are int64 class ids ``[N]``; regression targets are
    float32 ``[N, d]``.
    """

    inputs: np.ndarray
    labels: np.ndarray
    task: str = "classification"
    name: str = ""
    split: str = "custom"

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ModelError(f"unknown task {self.task!r}")
        if self.split not in ("train", "strong_test", "weak_test", "custom"):
            raise ModelError(f"unknown split {self.split!r}")
        inputs = np.array(self.inputs, dtype=FLOAT, order="C", copy=True)
        if inputs.ndim < 2 or inputs.shape[0] < 1:
            raise ModelError("inputs must be [N, ...] with N >= 1")
        if not np.all(np.isfinite(inputs)):
            raise ModelError("non-finite inputs")
        if self.task == "classification":
            labels = np.array(self.labels, dtype=np.int64, copy=True)
            if labels.shape != (inputs.shape[0],):
                raise ModelError(f"labels must be [N] class ids, got shape {labels.shape}")
            if labels.min() < 0:
                raise ModelError("negative class id")
        else:
            labels = np.array(self.labels, dtype=FLOAT, copy=True)
            if labels.ndim != 2 or labels.shape[0] != inputs.shape[0]:
                raise ModelError(f"targets must be [N, d], got shape {labels.shape}")
            if not np.all(np.isfinite(labels)):
                raise ModelError("non-finite targets")
        inputs.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return int(self.inputs.shape[0])

    def take(self, indices: np.ndarray, split: str | None = None) -> "Dataset":
        return Dataset(
            self.inputs[indices],
            self.labels[indices],
            task=self.task,
            name=self.name,
            split=self.split if split is None else split,
        )


def predict_correctness(
    instance: ModelInstance, data: Dataset, tau: float | None = None
) -> np.ndarray:
    """Per-input correctness (bool [N]).

    Classification: argmax class (ties broken toward the lowest index)
    equals the label.  Regression: every output coordinate within ``tau``
    of the target.
    """
    if data.task != instance.graph.task:
        raise ModelError(f"dataset task {data.task!r} != model task {instance.graph.task!r}")
    out = forward(instance, data.inputs)
    if data.task == "classification":
        if data.labels.max() >= out.shape[1]:
            raise ModelError("class id out of range for model output")
        return np.argmax(out, axis=1) == data.labels
    if tau is None:
        raise ModelError("regression correctness needs a tolerance tau")
    return np.max(np.abs(out - data.labels), axis=1) <= FLOAT(tau)


def accuracy(instance: ModelInstance, data: Dataset, tau: float | None = None) -> float:
    """Fraction of inputs answered correctly, in [0, 1]."""
    return float(np.mean(predict_correctness(instance, data, tau)))
