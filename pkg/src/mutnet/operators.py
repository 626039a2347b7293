"""Post-training mutation operators.

Each operator takes a trained :class:`~mutnet.model.ModelInstance` and a
seed and returns a new instance with perturbed parameters; the source is
never modified.  Two families exist:

* weight-level: every kernel entry in scope is selected independently with
  probability ``ratio``;

  - ``GF``  replace w by clip(w * (1 + eps), -1, 1), eps ~ N(0, sigma^2)
  - ``WI``  replace w by w * (1 - inhibition)

* neuron-level: ``max(1, round(ratio * pool))`` neurons are drawn without
  replacement from the scoped pool (a neuron is one unit of a parametric
  layer's output: a dense column or a conv output channel);

  - ``WS``  shuffle the incoming weights of each chosen neuron
  - ``NS``  pair up chosen neurons within a layer and swap their incoming
            weights and biases
  - ``NEB`` zero the outgoing weights of each chosen neuron
  - ``NAI`` negate the outgoing weights of each chosen neuron
  - ``NI``  scale the outgoing weights of each chosen neuron by
            (1 - inhibition)

``NEB``/``NAI``/``NI`` act on outgoing weights, so their pool excludes
neurons of the last parametric layer (nothing downstream to edit).

Arithmetic convention: multiplicative updates (GF, WI, NI) are computed in
float64 and rounded once back to float32, so independent recomputation of
the affected entries matches bit for bit.  Unselected entries are carried
over untouched.

Randomness is drawn from one ``default_rng(seed)`` stream in a fixed,
documented order (see each operator), making ``apply`` a pure function of
``(instance, cfg, seed)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .model import FLOAT, ModelGraph, ModelInstance
from .rng import make_rng

OPERATORS = ("GF", "WS", "NEB", "NAI", "NS", "WI", "NI")
WEIGHT_OPERATORS = ("GF", "WI")
NEURON_OPERATORS = ("WS", "NS", "NEB", "NAI", "NI")
OUTGOING_OPERATORS = ("NEB", "NAI", "NI")

SEARCHABLE_PARAMS = ("ratio", "inhibition", "noise_sigma")

DEFAULT_RATIO = 0.05
DEFAULT_NOISE_SIGMA = 0.5


class OperatorError(ValueError):
    """Bad operator configuration, or operator inapplicable to the graph."""


@dataclass(frozen=True)
class OperatorConfig:
    """Which operator to run and with what intensity.

    ``ratio`` controls how much of the pool is touched; ``inhibition`` is
    the WI/NI damping factor (may stay None in a search template and be
    filled in per probe); ``noise_sigma`` is the GF noise scale;
    ``layer_scope`` optionally restricts the operator to the given
    parametric layer indices.  Fields irrelevant to the operator are
    ignored.
    """

    operator: str
    ratio: float = DEFAULT_RATIO
    inhibition: float | None = None
    noise_sigma: float | None = None
    layer_scope: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if self.operator not in OPERATORS:
            raise OperatorError(f"unknown operator {self.operator!r}")
        if not 0.0 <= self.ratio <= 1.0:
            raise OperatorError(f"ratio must be in [0, 1], got {self.ratio}")
        if self.inhibition is not None and not 0.0 <= self.inhibition <= 1.0:
            raise OperatorError(f"inhibition must be in [0, 1], got {self.inhibition}")
        if self.noise_sigma is not None and not self.noise_sigma > 0:
            raise OperatorError(f"noise_sigma must be > 0, got {self.noise_sigma}")
        if self.layer_scope is not None:
            object.__setattr__(self, "layer_scope", tuple(int(i) for i in self.layer_scope))

    def with_value(self, param: str, value: float) -> "OperatorConfig":
        if param not in SEARCHABLE_PARAMS:
            raise OperatorError(f"unknown searchable parameter {param!r}")
        return dataclasses.replace(self, **{param: float(value)})

    def to_dict(self) -> dict:
        out = {"operator": self.operator, "ratio": self.ratio}
        if self.inhibition is not None:
            out["inhibition"] = self.inhibition
        if self.noise_sigma is not None:
            out["noise_sigma"] = self.noise_sigma
        if self.layer_scope is not None:
            out["layer_scope"] = list(self.layer_scope)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "OperatorConfig":
        known = {"operator", "ratio", "inhibition", "noise_sigma", "layer_scope"}
        extra = set(obj) - known
        if extra:
            raise OperatorError(f"unknown operator config keys: {sorted(extra)}")
        if "operator" not in obj:
            raise OperatorError("operator config needs an 'operator' key")
        kwargs = dict(obj)
        if kwargs.get("layer_scope") is not None:
            kwargs["layer_scope"] = tuple(kwargs["layer_scope"])
        return cls(**kwargs)


@dataclass(frozen=True, order=True)
class NeuronAddress:
    """A neuron, addressed by its parametric layer index and unit index."""

    layer_index: int
    unit: int


# ---------------------------------------------------------------------------
# pools
# ---------------------------------------------------------------------------


def scoped_parametric_indices(graph: ModelGraph, scope: tuple[int, ...] | None) -> tuple[int, ...]:
    parametric = graph.parametric_indices
    if scope is None:
        return parametric
    bad = [i for i in scope if i not in parametric]
    if bad:
        raise OperatorError(f"layer_scope entries {bad} are not parametric layers of this graph")
    return tuple(sorted(set(scope)))


def weight_pool_size(graph: ModelGraph, scope: tuple[int, ...] | None = None) -> int:
    """Kernel entries in scope (biases are never fuzzed or inhibited)."""
    return int(
        sum(np.prod(graph.layers[i].kernel_shape) for i in scoped_parametric_indices(graph, scope))
    )


def neuron_pool(graph: ModelGraph, scope: tuple[int, ...] | None = None) -> tuple[NeuronAddress, ...]:
    """All neurons in scope, ordered by (layer, unit)."""
    out = []
    for i in scoped_parametric_indices(graph, scope):
        out.extend(NeuronAddress(i, u) for u in range(graph.layers[i].units))
    return tuple(out)


def _next_parametric(graph: ModelGraph, layer_index: int) -> int | None:
    for j in range(layer_index + 1, len(graph.layers)):
        if graph.layers[j].is_parametric:
            return j
    return None


def outgoing_neuron_pool(
    graph: ModelGraph, scope: tuple[int, ...] | None = None
) -> tuple[NeuronAddress, ...]:
    """Neurons in scope that feed a later parametric layer."""
    return tuple(
        a for a in neuron_pool(graph, scope) if _next_parametric(graph, a.layer_index) is not None
    )


def operator_pool_size(cfg: OperatorConfig, graph: ModelGraph) -> int:
    if cfg.operator in WEIGHT_OPERATORS:
        return weight_pool_size(graph, cfg.layer_scope)
    if cfg.operator in OUTGOING_OPERATORS:
        return len(outgoing_neuron_pool(graph, cfg.layer_scope))
    return len(neuron_pool(graph, cfg.layer_scope))


def selection_count(cfg: OperatorConfig, graph: ModelGraph) -> int:
    """How many pool elements the operator touches (expected count for the
    Bernoulli weight operators, exact count for neuron operators).

    Neuron operators round half-to-even and select at least one neuron
    whenever ratio > 0; ratio == 0 always selects nothing.
    """
    pool = operator_pool_size(cfg, graph)
    if cfg.ratio == 0.0:
        return 0
    if cfg.operator in WEIGHT_OPERATORS:
        return int(round(cfg.ratio * pool))
    return min(pool, max(1, int(round(cfg.ratio * pool))))


# ---------------------------------------------------------------------------
# slice plumbing
# ---------------------------------------------------------------------------


def _slot_map(graph: ModelGraph) -> dict[tuple[int, str], int]:
    return {(i, role): pos for pos, (i, role, _) in enumerate(graph.tensor_slots())}


def _dense_rows_for_unit(graph: ModelGraph, addr: NeuronAddress, nxt: int) -> np.ndarray:
    """Rows of the next dense kernel fed by one neuron of layer ``addr``.

    The shape feeding the dense layer is found by walking back over
    flatten/activation layers (which preserve row-major element order);
    rows are the flat positions whose channel coordinate equals the unit.
    """
    j = nxt - 1
    while j > addr.layer_index and graph.layers[j].kind in ("flatten", "activation"):
        j -= 1
    shape = graph.output_shapes[j]
    if shape[-1] != graph.layers[addr.layer_index].units:
        raise OperatorError(
            f"cannot map neuron {addr} into dense layer {nxt}: channel axis was reshaped away"
        )
    flat = np.arange(int(np.prod(shape))).reshape(shape)
    return flat[..., addr.unit].ravel()


def _transform_outgoing(graph, tensors, slots, addr: NeuronAddress, fn) -> None:
    nxt = _next_parametric(graph, addr.layer_index)
    if nxt is None:  # pool construction prevents this
        raise OperatorError(f"neuron {addr} has no outgoing weights")
    kernel = tensors[slots[(nxt, "kernel")]]
    if graph.layers[nxt].kind == "conv2d":
        kernel[:, :, addr.unit, :] = fn(kernel[:, :, addr.unit, :])
    else:
        rows = _dense_rows_for_unit(graph, addr, nxt)
        kernel[rows, :] = fn(kernel[rows, :])


def _select_neurons(
    pool: tuple[NeuronAddress, ...], cfg: OperatorConfig, rng: np.random.Generator
) -> list[NeuronAddress]:
    """Draw the neuron sample for cfg (one rng.choice call), sorted."""
    if cfg.ratio == 0.0:
        return []
    if not pool:
        raise OperatorError(f"operator inapplicable: no {cfg.operator} pool in scope")
    n_sel = min(len(pool), max(1, int(round(cfg.ratio * len(pool)))))
    picked = rng.choice(len(pool), size=n_sel, replace=False)
    return sorted(pool[i] for i in picked)


# ---------------------------------------------------------------------------
# the operators
# ---------------------------------------------------------------------------


def _apply_weightwise(graph, tensors, slots, cfg, rng) -> int:
    """GF / WI.  Per scoped layer (ascending): draw the Bernoulli mask over
    the kernel, then (GF only) the noise field; selected entries are
    rewritten in float64 and cast back."""
    touched = 0
    for i in scoped_parametric_indices(graph, cfg.layer_scope):
        kernel = tensors[slots[(i, "kernel")]]
        mask = rng.random(kernel.shape) < cfg.ratio
        if cfg.operator == "GF":
            sigma = DEFAULT_NOISE_SIGMA if cfg.noise_sigma is None else cfg.noise_sigma
            noise = rng.standard_normal(kernel.shape) * sigma
            mutated = np.clip(kernel.astype(np.float64) * (1.0 + noise), -1.0, 1.0)
        else:  # WI
            if cfg.inhibition is None:
                raise OperatorError("WI needs an inhibition factor")
            mutated = kernel.astype(np.float64) * (1.0 - cfg.inhibition)
        kernel[mask] = mutated[mask].astype(FLOAT)
        touched += int(mask.sum())
    return touched


def _apply_shuffle(graph, tensors, slots, cfg, rng) -> list[NeuronAddress]:
    """WS.  Selection draw first, then one permutation per chosen neuron in
    (layer, unit) order."""
    chosen = _select_neurons(neuron_pool(graph, cfg.layer_scope), cfg, rng)
    for addr in chosen:
        kernel = tensors[slots[(addr.layer_index, "kernel")]]
        incoming = kernel[..., addr.unit]
        flat = np.ascontiguousarray(incoming).ravel()
        kernel[..., addr.unit] = flat[rng.permutation(flat.size)].reshape(incoming.shape)
    return chosen


def _apply_swap(graph, tensors, slots, cfg, rng) -> list[NeuronAddress]:
    """NS.  Selection draw first; per layer holding >= 2 chosen neurons (in
    layer order) one permutation arranges them into swap pairs; an odd
    neuron is left alone.  Incoming weights and biases are exchanged."""
    chosen = _select_neurons(neuron_pool(graph, cfg.layer_scope), cfg, rng)
    by_layer: dict[int, list[NeuronAddress]] = {}
    for addr in chosen:
        by_layer.setdefault(addr.layer_index, []).append(addr)
    for layer_index in sorted(by_layer):
        group = by_layer[layer_index]
        if len(group) < 2:
            continue
        order = rng.permutation(len(group))
        kernel = tensors[slots[(layer_index, "kernel")]]
        bias_slot = slots.get((layer_index, "bias"))
        for a in range(0, len(group) - 1, 2):
            u1 = group[order[a]].unit
            u2 = group[order[a + 1]].unit
            tmp = kernel[..., u1].copy()
            kernel[..., u1] = kernel[..., u2]
            kernel[..., u2] = tmp
            if bias_slot is not None:
                bias = tensors[bias_slot]
                bias[[u1, u2]] = bias[[u2, u1]]
    return chosen


def _apply_outgoing(graph, tensors, slots, cfg, rng) -> list[NeuronAddress]:
    """NEB / NAI / NI.  Selection draw only; outgoing slices rewritten in
    (layer, unit) order."""
    pool = outgoing_neuron_pool(graph, cfg.layer_scope)
    if not pool and cfg.ratio > 0:
        raise OperatorError(
            "operator inapplicable: no neurons with outgoing weights in scope "
            "(the last parametric layer is excluded)"
        )
    chosen = _select_neurons(pool, cfg, rng)
    if cfg.operator == "NEB":
        fn = lambda v: np.zeros_like(v)  # noqa: E731
    elif cfg.operator == "NAI":
        fn = lambda v: -v  # noqa: E731
    else:  # NI
        if cfg.inhibition is None:
            raise OperatorError("NI needs an inhibition factor")
        lam = cfg.inhibition
        fn = lambda v: (v.astype(np.float64) * (1.0 - lam)).astype(FLOAT)  # noqa: E731
    for addr in chosen:
        _transform_outgoing(graph, tensors, slots, addr, fn)
    return chosen


def apply(instance: ModelInstance, cfg: OperatorConfig, seed: int) -> ModelInstance:
    """Produce one mutant.  Pure in (instance, cfg, seed); source untouched."""
    graph = instance.graph
    scoped_parametric_indices(graph, cfg.layer_scope)  # validate scope early
    rng = make_rng(seed)
    tensors = [t.copy() for t in instance.tensors]
    slots = _slot_map(graph)

    if cfg.operator in WEIGHT_OPERATORS:
        touched = _apply_weightwise(graph, tensors, slots, cfg, rng)
        detail = {"touched_weights": touched}
    elif cfg.operator == "WS":
        chosen = _apply_shuffle(graph, tensors, slots, cfg, rng)
        detail = {"neurons": [[a.layer_index, a.unit] for a in chosen]}
    elif cfg.operator == "NS":
        chosen = _apply_swap(graph, tensors, slots, cfg, rng)
        detail = {"neurons": [[a.layer_index, a.unit] for a in chosen]}
    else:
        chosen = _apply_outgoing(graph, tensors, slots, cfg, rng)
        detail = {"neurons": [[a.layer_index, a.unit] for a in chosen]}

    origin = {
        "operator": cfg.operator,
        "params": cfg.to_dict(),
        "seed": int(seed),
        "source": instance.origin.get("seed"),
    }
    origin.update(detail)
    return instance.replace_tensors(tensors, provenance="mutant", origin=origin)
