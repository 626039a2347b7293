"""Minibatch SGD trainer for small feedforward stacks.

Everything is numpy float32, seeded, and replayable: training the same graph
with the same config and seed reproduces the parameters bit for bit.  The
trainer exists to manufacture populations of independently-initialized
"original" models; it favors clarity over throughput.

Conventions: Glorot-uniform kernel init with zero biases; cross-entropy is
computed from the final pre-activation (so a softmax or linear output layer
trains identically); max-pool routes gradient to every element equal to the
window maximum.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .model import Dataset, FLOAT, ModelError, ModelGraph, ModelInstance
from .rng import make_rng

OPTIMIZERS = ("sgd", "sgd_momentum")
LOSSES = ("cross_entropy", "mse")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    optimizer: str = "sgd_momentum"
    loss: str = "cross_entropy"

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainingConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(obj) - known
        if extra:
            raise ValueError(f"unknown training config keys: {sorted(extra)}")
        return cls(**obj)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def _glorot_limit(spec) -> float:
    if spec.kind == "dense":
        fan_in, fan_out = spec.kernel_shape
    else:
        kh, kw, in_ch, out_ch = spec.kernel_shape
        fan_in = kh * kw * in_ch
        fan_out = kh * kw * out_ch
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def _init_tensors(graph: ModelGraph, rng: np.random.Generator) -> list[np.ndarray]:
    tensors = []
    for layer_idx, role, shape in graph.tensor_slots():
        if role == "kernel":
            limit = _glorot_limit(graph.layers[layer_idx])
            tensors.append(rng.uniform(-limit, limit, size=shape).astype(FLOAT))
        else:
            tensors.append(np.zeros(shape, dtype=FLOAT))
    return tensors


def init_instance(graph: ModelGraph, seed: int) -> ModelInstance:
    """Glorot-uniform kernels, zero biases; equals training with epochs=0."""
    return ModelInstance(
        graph,
        tuple(_init_tensors(graph, make_rng(seed))),
        provenance="trained_original",
        origin={"seed": int(seed), "epochs": 0},
    )


# ---------------------------------------------------------------------------
# forward with caches / backward
# ---------------------------------------------------------------------------


def _check_trainable(graph: ModelGraph, loss: str) -> None:
    if not graph.layers[-1].is_parametric:
        raise ModelError("trainer requires a dense or conv2d output layer")
    final_act = graph.layers[-1].activation
    if loss == "cross_entropy":
        if graph.task != "classification" or final_act not in ("softmax", "linear"):
            raise ModelError("cross_entropy needs a classification graph with softmax/linear output")
    else:
        if final_act != "linear":
            raise ModelError("mse training needs a linear output layer")


def _forward_cached(graph: ModelGraph, tensors: list[np.ndarray], x: np.ndarray):
    """Forward pass keeping what backward needs; returns (logits, out, caches)."""
    from .model import _conv2d_patches, _maxpool2d, apply_activation  # local layer kernels

    caches = []
    last = len(graph.layers) - 1
    logits = None
    slot_of = {}
    pos = 0
    for i, role, _ in graph.tensor_slots():
        slot_of[(i, role)] = pos
        pos += 1

    for i, spec in enumerate(graph.layers):
        if spec.kind == "dense":
            kernel = tensors[slot_of[(i, "kernel")]]
            z = x @ kernel
            if spec.has_bias:
                z = z + tensors[slot_of[(i, "bias")]]
            a = apply_activation(spec.activation, z)
            caches.append(("dense", i, x, a))
            if i == last:
                logits = z
            x = a
        elif spec.kind == "conv2d":
            kernel = tensors[slot_of[(i, "kernel")]]
            kh, kw, in_ch, out_ch = kernel.shape
            patches = _conv2d_patches(x, kh, kw, spec.strides)
            b, oh, ow = patches.shape[:3]
            cols = patches.reshape(b * oh * ow, kh * kw * in_ch)
            z = cols @ kernel.reshape(kh * kw * in_ch, out_ch)
            if spec.has_bias:
                z = z + tensors[slot_of[(i, "bias")]]
            z = z.reshape(b, oh, ow, out_ch)
            a = apply_activation(spec.activation, z)
            caches.append(("conv2d", i, cols, x.shape, a))
            if i == last:
                logits = z
            x = a
        elif spec.kind == "maxpool2d":
            out = _maxpool2d(x, spec.pool_size, spec.strides)
            caches.append(("maxpool2d", i, x, out))
            x = out
        elif spec.kind == "flatten":
            caches.append(("flatten", i, x.shape))
            x = x.reshape(x.shape[0], -1)
        else:
            a = apply_activation(spec.activation, x)
            caches.append(("activation", i, a))
            x = a
    return logits, x, caches


def _act_backward(name: str, d_out: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "linear":
        return d_out
    if name == "relu":
        return d_out * (a > 0)
    if name == "sigmoid":
        return d_out * a * (FLOAT(1) - a)
    if name == "tanh":
        return d_out * (FLOAT(1) - a * a)
    if name == "softmax":
        dot = np.sum(d_out * a, axis=-1, keepdims=True)
        return a * (d_out - dot)
    raise ModelError(f"unknown activation {name!r}")


def _col2im(dcols, x_shape, kh, kw, strides):
    b, h, w, c = x_shape
    sh, sw = strides
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    dx = np.zeros(x_shape, dtype=FLOAT)
    dpatch = dcols.reshape(b, oh, ow, kh, kw, c)
    for ih in range(kh):
        for iw in range(kw):
            dx[:, ih : ih + oh * sh : sh, iw : iw + ow * sw : sw, :] += dpatch[:, :, :, ih, iw, :]
    return dx


def _maxpool_backward(d_out, x, out, pool, strides):
    ph, pw = pool
    sh, sw = strides
    oh, ow = out.shape[1:3]
    dx = np.zeros_like(x)
    for ih in range(ph):
        for iw in range(pw):
            window = x[:, ih : ih + oh * sh : sh, iw : iw + ow * sw : sw, :]
            dx[:, ih : ih + oh * sh : sh, iw : iw + ow * sw : sw, :] += (window == out) * d_out
    return dx


def _backward(graph, tensors, caches, d_final_pre):
    """Gradients per tensor slot; d_final_pre is dL/dz of the output layer."""
    grads = [None] * len(tensors)
    slot_of = {}
    pos = 0
    for i, role, _ in graph.tensor_slots():
        slot_of[(i, role)] = pos
        pos += 1

    d = d_final_pre
    last = len(graph.layers) - 1
    for cache in reversed(caches):
        kind, i = cache[0], cache[1]
        spec = graph.layers[i]
        if kind == "dense":
            _, _, x_in, a = cache
            dz = d if i == last else _act_backward(spec.activation, d, a)
            grads[slot_of[(i, "kernel")]] = x_in.T @ dz
            if spec.has_bias:
                grads[slot_of[(i, "bias")]] = dz.sum(axis=0)
            d = dz @ tensors[slot_of[(i, "kernel")]].T
        elif kind == "conv2d":
            _, _, cols, x_shape, a = cache
            dz = d if i == last else _act_backward(spec.activation, d, a)
            kh, kw, in_ch, out_ch = spec.kernel_shape
            dz2 = dz.reshape(-1, out_ch)
            grads[slot_of[(i, "kernel")]] = (cols.T @ dz2).reshape(spec.kernel_shape)
            if spec.has_bias:
                grads[slot_of[(i, "bias")]] = dz2.sum(axis=0)
            kernel = tensors[slot_of[(i, "kernel")]]
            dcols = dz2 @ kernel.reshape(kh * kw * in_ch, out_ch).T
            d = _col2im(dcols, x_shape, kh, kw, spec.strides)
        elif kind == "maxpool2d":
            _, _, x_in, out = cache
            d = _maxpool_backward(d, x_in, out, spec.pool_size, spec.strides)
        elif kind == "flatten":
            _, _, in_shape = cache
            d = d.reshape(in_shape)
        else:  # activation
            _, _, a = cache
            d = _act_backward(spec.activation, d, a)
    return grads


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _cross_entropy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    z = logits.astype(np.float64)
    m = z.max(axis=1, keepdims=True)
    lse = (m[:, 0] + np.log(np.exp(z - m).sum(axis=1)))
    true = z[np.arange(len(labels)), labels]
    return float(np.mean(lse - true))


def dataset_loss(instance: ModelInstance, data: Dataset, loss: str) -> float:
    """Mean loss of an instance over a dataset (float64 accumulation)."""
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}")
    tensors = list(instance.tensors)
    logits, out, _ = _forward_cached(instance.graph, tensors, data.inputs)
    if loss == "cross_entropy":
        _check_trainable(instance.graph, loss)
        return _cross_entropy_from_logits(logits, data.labels)
    diff = out.astype(np.float64) - data.labels.astype(np.float64)
    return float(np.mean(diff * diff))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def train_instance(
    graph: ModelGraph,
    train_data: Dataset,
    cfg: TrainingConfig,
    seed: int,
) -> tuple[ModelInstance, list[float]]:
    """Train one seeded instance; returns (instance, per-epoch train loss).

    With ``epochs=0`` this is exactly :func:`init_instance`.  Raises
    :class:`DivergenceError` if the train loss goes non-finite.
    """
    if train_data.task != graph.task:
        raise ModelError(f"dataset task {train_data.task!r} != graph task {graph.task!r}")
    _check_trainable(graph, cfg.loss)
    rng = make_rng(seed)
    tensors = _init_tensors(graph, rng)
    velocity = [np.zeros_like(t) for t in tensors]
    lr = FLOAT(cfg.learning_rate)
    mu = FLOAT(cfg.momentum)
    n = train_data.n
    out_dim = graph.out_dim
    losses: list[float] = []

    for _epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = train_data.inputs[idx]
            yb = train_data.labels[idx]
            logits, out, caches = _forward_cached(graph, tensors, xb)
            b = len(idx)
            if cfg.loss == "cross_entropy":
                probs = np.exp(logits - logits.max(axis=1, keepdims=True))
                probs /= probs.sum(axis=1, keepdims=True)
                onehot = np.zeros((b, out_dim), dtype=FLOAT)
                onehot[np.arange(b), yb] = FLOAT(1)
                d_pre = (probs - onehot) / FLOAT(b)
            else:
                d_pre = (out - yb) * FLOAT(2.0 / (b * out_dim))
            grads = _backward(graph, tensors, caches, d_pre)
            for k, g in enumerate(grads):
                if g is None:
                    continue
                if cfg.optimizer == "sgd_momentum":
                    velocity[k] = mu * velocity[k] + g
                    tensors[k] = tensors[k] - lr * velocity[k]
                else:
                    tensors[k] = tensors[k] - lr * g
        logits, out, _ = _forward_cached(graph, tensors, train_data.inputs)
        if cfg.loss == "cross_entropy":
            epoch_loss = _cross_entropy_from_logits(logits, train_data.labels)
        else:
            diff = out.astype(np.float64) - train_data.labels.astype(np.float64)
            epoch_loss = float(np.mean(diff * diff))
        losses.append(epoch_loss)
        if not np.isfinite(epoch_loss) or any(not np.all(np.isfinite(t)) for t in tensors):
            raise DivergenceError(f"training diverged (seed {seed}, epoch {_epoch + 1})")

    instance = ModelInstance(
        graph,
        tuple(tensors),
        provenance="trained_original",
        origin={"seed": int(seed), "epochs": cfg.epochs, "loss": cfg.loss},
    )
    return instance, losses


# ---------------------------------------------------------------------------
# populations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OriginalPopulation:
    """m independently trained instances of one graph."""

    graph: ModelGraph
    instances: tuple[ModelInstance, ...]
    seeds: tuple[int, ...]
    config: TrainingConfig | None = None
    loss_curves: tuple[tuple[float, ...], ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "instances", tuple(self.instances))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "loss_curves", tuple(tuple(c) for c in self.loss_curves))
        if len(self.instances) < 2:
            raise ValueError("a population needs at least 2 instances")
        if len(self.seeds) != len(self.instances):
            raise ValueError("one seed per instance required")
        for inst in self.instances:
            if inst.graph != self.graph:
                raise ValueError("all instances must share the population graph")

    @property
    def m(self) -> int:
        return len(self.instances)

    def accuracies(self, data: Dataset, tau: float | None = None) -> np.ndarray:
        from .model import accuracy

        return np.array([accuracy(inst, data, tau) for inst in self.instances], dtype=np.float64)


def train_population(
    graph: ModelGraph,
    train_data: Dataset,
    cfg: TrainingConfig,
    m: int,
    base_seed: int,
) -> OriginalPopulation:
    """Train m originals with seeds base_seed, base_seed+1, ...

    A diverging seed is retried once with the learning rate cut 10x; if it
    still diverges the error names the seed.
    """
    if m < 2:
        raise ValueError(f"population size must be >= 2, got {m}")
    instances, seeds, curves = [], [], []
    for i in range(m):
        seed = int(base_seed) + i
        try:
            inst, losses = train_instance(graph, train_data, cfg, seed)
        except DivergenceError:
            calmer = dataclasses.replace(cfg, learning_rate=cfg.learning_rate / 10.0)
            try:
                inst, losses = train_instance(graph, train_data, calmer, seed)
            except DivergenceError as exc:
                raise DivergenceError(
                    f"seed {seed} diverged even at learning rate {calmer.learning_rate}"
                ) from exc
        instances.append(inst)
        seeds.append(seed)
        curves.append(tuple(losses))
    return OriginalPopulation(
        graph=graph,
        instances=tuple(instances),
        seeds=tuple(seeds),
        config=cfg,
        loss_curves=tuple(curves),
    )
