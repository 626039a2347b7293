"""Activation spectra: where do mutants light up differently?

For every input, the post-activation values of a chosen layer set (by
default the last hidden layer) are summarized as a normalized histogram
over a fixed value range; an instance group's profile averages those
histograms across its instances.  Profiles are compared with a
log-Euclidean distance,

    d(p, q) = mean_i sqrt( sum_j (ln(eps + p_ij) - ln(eps + q_ij))^2 ),

which is symmetric, zero on identical profiles, and obeys the triangle
inequality (it is the Euclidean metric after an injective log transform of
the eps-shifted bin masses).  The epsilon keeps empty bins from blowing
the metric up so far that populated bins stop mattering.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import Dataset, ModelGraph, ModelInstance, forward_activations
from .rng import make_rng

EPS = 1e-12
DEFAULT_BINS = 100
DEFAULT_PERCENTILE = 99.9


def _as_layer_tuple(layers: int | Sequence[int]) -> tuple[int, ...]:
    if isinstance(layers, (int, np.integer)):
        return (int(layers),)
    out = tuple(int(i) for i in layers)
    if not out:
        raise ValueError("empty layer selection")
    return out


@dataclass(frozen=True)
class SpectrumProfile:
    """Per-input activation histograms of one instance group.

    ``histograms`` is float64 [n_inputs, bins]; every row sums to 1 (each
    row is the probability mass of the pooled neuron activations of the
    selected layers for that input, averaged over instances).  Profiles
    are comparable only when built over the same layers, bin count and
    value range.
    """

    histograms: np.ndarray
    bin_edges: np.ndarray
    layer_indices: tuple[int, ...]
    tag: str = ""

    def __post_init__(self) -> None:
        h = np.asarray(self.histograms, dtype=np.float64)
        edges = np.asarray(self.bin_edges, dtype=np.float64)
        if h.ndim != 2 or h.shape[0] < 1:
            raise ValueError("histograms must be [n_inputs, bins]")
        if edges.shape != (h.shape[1] + 1,):
            raise ValueError("bin_edges must have bins + 1 entries")
        if np.any(np.diff(edges) <= 0):
            raise ValueError("bin_edges must be strictly increasing")
        sums = h.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise ValueError("every histogram row must sum to 1")
        h.flags.writeable = False
        edges.flags.writeable = False
        object.__setattr__(self, "histograms", h)
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "layer_indices", _as_layer_tuple(self.layer_indices))

    @property
    def n_inputs(self) -> int:
        return int(self.histograms.shape[0])

    @property
    def bins(self) -> int:
        return int(self.histograms.shape[1])


def default_spectrum_layer(graph: ModelGraph) -> int:
    """The layer producing the last hidden post-activation values.

    That is the second-to-last parametric layer — or, when its activation
    lives in a separate following activation layer, that activation layer.
    """
    parametric = graph.parametric_indices
    if len(parametric) < 2:
        raise ValueError("graph has no hidden parametric layer to profile")
    index = parametric[-2]
    layers = graph.layers
    if (
        layers[index].activation == "linear"
        and index + 1 < len(layers)
        and layers[index + 1].kind == "activation"
    ):
        return index + 1
    return index


def default_value_range(
    instances: Sequence[ModelInstance],
    inputs: np.ndarray,
    layers: int | Sequence[int],
    percentile: float = DEFAULT_PERCENTILE,
) -> tuple[float, float]:
    """(0, high) where high is a high percentile of the group's activations.

    Keeping the range fixed across groups makes their histograms
    comparable; the percentile trims stray outliers that would stretch the
    bins.  Falls back to (0, 1) if the layer never activates.
    """
    if not instances:
        raise ValueError("need at least one instance")
    layer_tuple = _as_layer_tuple(layers)
    collected = []
    for inst in instances:
        acts = forward_activations(inst, inputs, layer_tuple)
        collected.extend(np.asarray(acts[i], dtype=np.float64).ravel() for i in layer_tuple)
    values = np.concatenate(collected)
    high = float(np.percentile(values, percentile))
    if high <= 0.0:
        high = 1.0
    return (0.0, high)


def _bin_indices(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Left-closed bins, last bin closed on both sides (histogram convention)."""
    idx = np.searchsorted(edges, values, side="right") - 1
    return np.clip(idx, 0, edges.size - 2)


def extract_spectrum(
    instances: Sequence[ModelInstance],
    inputs: np.ndarray,
    layers: int | Sequence[int],
    bins: int = DEFAULT_BINS,
    value_range: tuple[float, float] = (0.0, 1.0),
    tag: str = "",
) -> SpectrumProfile:
    """Average per-input activation histograms across a group of instances.

    Activation values of all selected layers are pooled per input and
    clipped into ``value_range`` before binning, so mass beyond the range
    lands in the edge bins rather than vanishing.  Counts are accumulated
    as integers and normalized once, which makes the result independent of
    the instance order down to the last bit.
    """
    if not instances:
        raise ValueError("need at least one instance")
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    layer_tuple = _as_layer_tuple(layers)
    lo, hi = float(value_range[0]), float(value_range[1])
    if not lo < hi:
        raise ValueError(f"empty value range {value_range}")
    edges = np.linspace(lo, hi, bins + 1)
    n = len(inputs)
    counts = np.zeros((n, bins), dtype=np.int64)
    values_per_input = 0
    for inst in instances:
        acts_by_layer = forward_activations(inst, inputs, layer_tuple)
        pooled = np.concatenate(
            [np.asarray(acts_by_layer[i], dtype=np.float64).reshape(n, -1) for i in layer_tuple],
            axis=1,
        )
        values_per_input = pooled.shape[1]
        idx = _bin_indices(np.clip(pooled, lo, hi), edges)
        flat = (idx + np.arange(n)[:, None] * bins).ravel()
        counts += np.bincount(flat, minlength=n * bins).reshape(n, bins)
    histograms = counts / (len(instances) * values_per_input)
    return SpectrumProfile(histograms, edges, layer_tuple, tag=tag)


def spectral_distance(a: SpectrumProfile, b: SpectrumProfile) -> float:
    """Mean over inputs of the log-Euclidean distance between histograms."""
    if a.layer_indices != b.layer_indices:
        raise ValueError("profiles were taken from different layers")
    if a.histograms.shape != b.histograms.shape or not np.array_equal(a.bin_edges, b.bin_edges):
        raise ValueError("profiles are not aligned (bins or inputs differ)")
    diff = np.log(EPS + a.histograms) - np.log(EPS + b.histograms)
    return float(np.mean(np.sqrt(np.sum(diff * diff, axis=1))))


@dataclass(frozen=True)
class GroupComparison:
    """Distance distributions within and across two profile groups."""

    within_a: tuple[float, ...]
    within_b: tuple[float, ...]
    cross: tuple[float, ...]

    @staticmethod
    def _mean(values: tuple[float, ...]) -> float | None:
        return float(np.mean(values)) if values else None

    @property
    def within_a_mean(self) -> float | None:
        return self._mean(self.within_a)

    @property
    def within_b_mean(self) -> float | None:
        return self._mean(self.within_b)

    @property
    def cross_mean(self) -> float | None:
        return self._mean(self.cross)

    def summary(self) -> dict[str, dict[str, float | None]]:
        """Median and interquartile range of each distribution."""
        out: dict[str, dict[str, float | None]] = {}
        for name, values in (
            ("within_a", self.within_a),
            ("within_b", self.within_b),
            ("cross", self.cross),
        ):
            if values:
                arr = np.asarray(values, dtype=np.float64)
                q1, med, q3 = (float(v) for v in np.percentile(arr, [25, 50, 75]))
                out[name] = {"median": med, "iqr": q3 - q1, "mean": float(arr.mean())}
            else:
                out[name] = {"median": None, "iqr": None, "mean": None}
        return out


def compare_groups(
    group_a: Sequence[SpectrumProfile], group_b: Sequence[SpectrumProfile]
) -> GroupComparison:
    """All pairwise distances within each group and across the two groups."""
    if not group_a or not group_b:
        raise ValueError("both groups need at least one profile")
    within_a = tuple(
        spectral_distance(group_a[i], group_a[j])
        for i in range(len(group_a))
        for j in range(i + 1, len(group_a))
    )
    within_b = tuple(
        spectral_distance(group_b[i], group_b[j])
        for i in range(len(group_b))
        for j in range(i + 1, len(group_b))
    )
    cross = tuple(spectral_distance(a, b) for a in group_a for b in group_b)
    return GroupComparison(within_a, within_b, cross)


@dataclass(frozen=True)
class DistanceMatrix:
    """Symmetric pairwise distances with the profile tags as labels."""

    values: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError("distance matrix must be square")
        if len(self.labels) != v.shape[0]:
            raise ValueError("one label per row required")
        if np.any(np.diag(v) != 0.0) or np.any(v < 0.0) or not np.array_equal(v, v.T):
            raise ValueError("distances must be symmetric, non-negative, zero on the diagonal")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "labels", tuple(self.labels))


def distance_matrix(profiles: Sequence[SpectrumProfile]) -> DistanceMatrix:
    n = len(profiles)
    out = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = spectral_distance(profiles[i], profiles[j])
    return DistanceMatrix(out, tuple(p.tag for p in profiles))


def sample_inputs(data: Dataset, fraction: float, seed: int) -> Dataset:
    """Seeded without-replacement sample of ceil(fraction * N) inputs."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    k = math.ceil(fraction * data.n)
    rng = make_rng(seed)
    picked = np.sort(rng.choice(data.n, size=k, replace=False))
    return data.take(picked, split="custom")
