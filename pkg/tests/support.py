"""Builders shared across the test modules.

Everything here is deliberately independent of the library's own training
and serialization helpers where an oracle needs to be: random models are
assembled tensor-by-tensor so tests can cross-check library behavior
against hand arithmetic.
"""

from __future__ import annotations

import numpy as np

from mutnet.model import (
    Dataset,
    ModelGraph,
    ModelInstance,
    activation,
    conv2d,
    dense,
    flatten,
    maxpool2d,
)


def mlp_graph(dims, hidden_activation="relu", out_activation="softmax", task="classification"):
    """Plain dense stack: dims = [in, h1, ..., out]."""
    layers = []
    for i in range(len(dims) - 1):
        act = out_activation if i == len(dims) - 2 else hidden_activation
        layers.append(dense(dims[i], dims[i + 1], activation=act))
    return ModelGraph(tuple(layers), input_shape=(dims[0],), task=task)


def instance_from_arrays(graph: ModelGraph, arrays, provenance="trained_original"):
    return ModelInstance(graph, tuple(arrays), provenance=provenance)


def random_instance(graph: ModelGraph, seed: int, scale: float = 0.5) -> ModelInstance:
    """Uniform(-scale, scale) weights for every slot."""
    rng = np.random.default_rng(seed)
    tensors = [
        rng.uniform(-scale, scale, size=shape).astype(np.float32)
        for (_, _, shape) in graph.tensor_slots()
    ]
    return ModelInstance(graph, tuple(tensors))


def dyadic_instance(graph: ModelGraph, seed: int, denom: int = 256) -> ModelInstance:
    """Weights on the grid k/denom, k in [-denom, denom].

    Products with dyadic inhibition factors are then exact in float32,
    which lets tests assert weight-change identities with ==.
    """
    rng = np.random.default_rng(seed)
    tensors = []
    for (_, _, shape) in graph.tensor_slots():
        k = rng.integers(-denom, denom + 1, size=shape)
        tensors.append((k / denom).astype(np.float32))
    return ModelInstance(graph, tuple(tensors))


def random_small_graph(rng: np.random.Generator) -> ModelGraph:
    """A small random architecture: dense-only or conv head + dense tail."""
    if rng.random() < 0.7:
        depth = int(rng.integers(2, 5))
        dims = [int(rng.integers(2, 7)) for _ in range(depth + 1)]
        acts = ["relu", "tanh", "sigmoid", "linear"]
        layers = []
        for i in range(depth):
            act = "softmax" if i == depth - 1 else acts[int(rng.integers(0, len(acts)))]
            layers.append(dense(dims[i], dims[i + 1], activation=act))
        return ModelGraph(tuple(layers), input_shape=(dims[0],), task="classification")
    side = int(rng.integers(4, 7))
    in_ch = int(rng.integers(1, 3))
    out_ch = int(rng.integers(2, 4))
    conv = conv2d(2, 2, in_ch, out_ch, activation="relu")
    h = side - 1
    layers = [conv]
    use_pool = bool(rng.random() < 0.5) and h >= 2
    if use_pool:
        layers.append(maxpool2d((2, 2)))
        h = h // 2
    layers.append(flatten())
    flat = h * h * out_ch
    n_out = int(rng.integers(2, 5))
    layers.append(dense(flat, n_out, activation="softmax"))
    return ModelGraph(tuple(layers), input_shape=(side, side, in_ch), task="classification")


def toy_classification(n: int = 12, n_classes: int = 2, seed: int = 0, dim: int = 2) -> Dataset:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, dim)).astype(np.float32)
    y = rng.integers(0, n_classes, size=n)
    return Dataset(x, y, task="classification", split="custom")


def identity_classifier(n_classes: int, out_activation: str = "linear") -> ModelInstance:
    """n->n dense with the identity kernel: argmax(output) == argmax(input)."""
    graph = ModelGraph(
        (dense(n_classes, n_classes, activation=out_activation, bias=False),),
        input_shape=(n_classes,),
        task="classification",
    )
    return ModelInstance(graph, (np.eye(n_classes, dtype=np.float32),))


def kernel_sum(instance: ModelInstance) -> float:
    """Sum of |w| over kernel slots only (biases excluded), in float64."""
    total = 0.0
    for t, (_, role, _) in zip(instance.tensors, instance.graph.tensor_slots()):
        if role == "kernel":
            total += float(np.abs(t.astype(np.float64)).sum())
    return total


def kernel_abs_delta(a: ModelInstance, b: ModelInstance) -> float:
    """Sum_i |a_i - b_i| over kernel entries, in float64."""
    total = 0.0
    for ta, tb, (_, role, _) in zip(a.tensors, b.tensors, a.graph.tensor_slots()):
        if role == "kernel":
            total += float(np.abs(ta.astype(np.float64) - tb.astype(np.float64)).sum())
    return total


def tensors_equal(a: ModelInstance, b: ModelInstance) -> bool:
    return all(
        ta.shape == tb.shape and np.array_equal(ta, tb) for ta, tb in zip(a.tensors, b.tensors)
    )
