"""Statistical machinery: stability, kill decisions, scores.

Mutants and originals are populations, so every comparison is a two-sample
test over per-instance metric values (accuracy, usually).  A mutant
configuration is *killed* by a test set when the effect size (Cohen's d,
pooled Bessel-corrected standard deviation) reaches ``beta`` AND a
two-sided Mann-Whitney U test rejects at ``alpha``.  Sample stability is
judged by the relative standard error of the metric across instances.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence

import numpy as np
from scipy import stats as sstats

from .model import Dataset, ModelInstance, _softmax, accuracy, forward, predict_correctness
from .train import OriginalPopulation

DEFAULT_RSE_THRESHOLD = 0.05

# Exact Mann-Whitney enumeration is used for small samples; beyond this many
# arrangements the normal approximation with tie correction takes over.
_EXACT_ENUM_CAP = 200_000


@dataclass(frozen=True)
class EvaluationSample:
    """Per-instance metric values for one population on one dataset.

    ``values`` holds one accuracy (or correctness rate) per instance, laid
    out batch-major: ``n`` batches of ``m`` instances each.  Metric values
    are rates, so they must sit in [0, 1].
    """

    values: np.ndarray
    dataset: str = ""
    population: str = ""
    n: int = 1
    m: int = 0

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64).ravel()
        if values.size < 2:
            raise ValueError("a sample needs at least 2 values")
        if not np.all(np.isfinite(values)):
            raise ValueError("non-finite metric values")
        if np.any(values < 0.0) or np.any(values > 1.0):
            raise ValueError("metric values must lie in [0, 1]")
        m = self.m if self.m else values.size // max(self.n, 1)
        object.__setattr__(self, "m", int(m))
        if self.n < 1 or self.m < 1 or self.n * self.m != values.size:
            raise ValueError(
                f"sample shape mismatch: {values.size} values != n={self.n} * m={self.m}"
            )
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def k(self) -> int:
        return int(self.values.size)


def evaluate_population(
    instances: Sequence[ModelInstance],
    data: Dataset,
    tau: float | None = None,
    dataset_tag: str | None = None,
    n_batches: int = 1,
    population: str = "",
) -> EvaluationSample:
    values = [accuracy(inst, data, tau) for inst in instances]
    return EvaluationSample(
        np.array(values),
        dataset=dataset_tag or data.split,
        population=population,
        n=n_batches,
    )


# ---------------------------------------------------------------------------
# stability
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StabilityReport:
    mean: float
    std: float
    se: float
    rse: float
    n_instances: int
    stable: bool
    threshold: float
    reason: str | None = None
    trace: tuple[float, ...] = ()


def _rse_value(values: np.ndarray) -> tuple[float, float, float]:
    """(mean, se, rse) of a slice; rse is +inf for a zero-mean slice."""
    mean = float(values.mean())
    se = float(values.std(ddof=1)) / math.sqrt(values.size)
    return mean, se, (math.inf if mean == 0.0 else se / abs(mean))


def rse(sample, threshold: float = DEFAULT_RSE_THRESHOLD) -> StabilityReport:
    """Relative standard error of a metric sample.

    SE is the Bessel-corrected standard deviation over sqrt(n*m); RSE is
    SE / |mean|.  The sample is stable when RSE < threshold.  A zero-mean
    sample has no meaningful relative error and is reported unstable.

    The report's ``trace`` holds the RSE recomputed after each batch of
    ``m`` values (a single entry when the sample is one undivided batch),
    so callers can see how fast the estimate settled.
    """
    values = np.asarray(getattr(sample, "values", sample), dtype=np.float64).ravel()
    if values.size < 2:
        raise ValueError("RSE needs at least 2 values")
    if not 0 < threshold:
        raise ValueError(f"threshold must be positive, got {threshold}")
    m = int(getattr(sample, "m", values.size))
    trace = []
    for j in range(m, values.size + 1, m):
        if j < 2:
            continue
        trace.append(_rse_value(values[:j])[2])
    mean, se, value = _rse_value(values)
    std = float(values.std(ddof=1))
    if not trace or trace[-1] != value:  # guard against a ragged tail
        trace.append(value)
    if mean == 0.0:
        return StabilityReport(
            mean, std, se, math.inf, values.size, False, threshold, "zero-mean metric", tuple(trace)
        )
    return StabilityReport(
        mean, std, se, value, values.size, value < threshold, threshold, None, tuple(trace)
    )


# ---------------------------------------------------------------------------
# kill decision
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KillThresholds:
    alpha: float = 0.05
    beta: float = 0.5

    def __post_init__(self) -> None:
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if not self.beta >= 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")


@dataclass(frozen=True)
class KillResult:
    killed: bool
    effect_size: float
    p_value: float


def cohens_d(x, y) -> float:
    """Absolute standardized mean difference, pooled Bessel-corrected std.

    Both samples constant: 0 when equal, +inf when different.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size < 2 or y.size < 2:
        raise ValueError("cohens_d needs at least 2 values per sample")
    diff = abs(float(x.mean()) - float(y.mean()))
    pooled_var = ((x.size - 1) * x.var(ddof=1) + (y.size - 1) * y.var(ddof=1)) / (
        x.size + y.size - 2
    )
    if pooled_var == 0.0:
        return 0.0 if diff == 0.0 else math.inf
    return diff / math.sqrt(pooled_var)


def _mwu_exact_p(x: np.ndarray, y: np.ndarray) -> float:
    """Two-sided exact permutation p-value for the U statistic.

    Enumerates all assignments of the pooled (mid)ranks to the first group
    and counts arrangements whose |U - n1*n2/2| reaches the observed one.
    Handles ties exactly (the permutation distribution conditions on the
    observed values).
    """
    n1, n2 = x.size, y.size
    ranks = sstats.rankdata(np.concatenate([x, y]))
    base = n1 * (n1 + 1) / 2.0
    center = n1 * n2 / 2.0
    t_obs = abs(ranks[:n1].sum() - base - center)
    hits = 0
    total = 0
    for combo in itertools.combinations(range(n1 + n2), n1):
        t = abs(sum(ranks[i] for i in combo) - base - center)
        if t >= t_obs - 1e-12:
            hits += 1
        total += 1
    return hits / total


def mann_whitney_p(x, y) -> float:
    """Two-sided Mann-Whitney U p-value.

    Small samples (min size < 8 and a feasible arrangement count) get an
    exact tie-aware enumeration; everything else uses the normal
    approximation with tie correction and continuity correction.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size < 2 or y.size < 2:
        raise ValueError("mann_whitney_p needs at least 2 values per sample")
    if min(x.size, y.size) < 8 and math.comb(x.size + y.size, x.size) <= _EXACT_ENUM_CAP:
        return _mwu_exact_p(x, y)
    res = sstats.mannwhitneyu(x, y, alternative="two-sided", method="asymptotic")
    return float(res.pvalue)


def is_killed(mutant_sample, original_sample, thresholds: KillThresholds = KillThresholds()) -> KillResult:
    """Statistical kill decision for a mutant population vs its originals.

    killed  <=>  effect size >= beta  AND  p < alpha.

    Two constant samples are decided directly: equal values mean the
    metric saw nothing (not killed, d=0, p=1); different values mean a
    deterministic shift (killed, d=inf, p=0 by convention).
    """
    x = np.asarray(getattr(mutant_sample, "values", mutant_sample), dtype=np.float64).ravel()
    y = np.asarray(getattr(original_sample, "values", original_sample), dtype=np.float64).ravel()
    if x.size < 2 or y.size < 2:
        raise ValueError("is_killed needs at least 2 values per sample")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite metric values")

    x_const = np.all(x == x[0])
    y_const = np.all(y == y[0])
    if x_const and y_const:
        if x[0] == y[0]:
            return KillResult(False, 0.0, 1.0)
        return KillResult(True, math.inf, 0.0)

    d = cohens_d(x, y)
    p = mann_whitney_p(x, y)
    return KillResult(bool(d >= thresholds.beta and p < thresholds.alpha), d, p)


# ---------------------------------------------------------------------------
# disagreement
# ---------------------------------------------------------------------------


def disagreement_rate(correctness: np.ndarray) -> float:
    """Fraction of inputs on which a set of models splits.

    ``correctness`` is boolean [k, N] (k models, N inputs).  An input
    counts only when at least one model is right AND at least one is wrong
    on it; inputs every model fails are not disagreements.  Returns a
    fraction in [0, 1].
    """
    c = np.asarray(correctness, dtype=bool)
    if c.ndim != 2 or c.shape[0] < 1 or c.shape[1] < 1:
        raise ValueError("correctness must be [k >= 1, N >= 1]")
    split = np.any(c, axis=0) & np.any(~c, axis=0)
    return float(split.mean())


# ---------------------------------------------------------------------------
# mutation scores
# ---------------------------------------------------------------------------


def class_probabilities(instance: ModelInstance, data: Dataset) -> np.ndarray:
    """Per-input class probability vectors (softmax applied if needed)."""
    if data.task != "classification":
        raise ValueError("class probabilities need a classification dataset")
    out = forward(instance, data.inputs)
    if instance.graph.layers[-1].activation != "softmax":
        out = _softmax(out.astype(np.float64))
    return np.asarray(out, dtype=np.float64)


def mutation_score_class_level(
    originals: OriginalPopulation,
    mutants: Sequence[ModelInstance],
    data: Dataset,
) -> float:
    """Classic per-class mutation score, averaged over single-instance mutants.

    A mutant kills class c when some input of class c is answered correctly
    by the reference original (the population's first instance) and wrongly
    by the mutant.  The score is the mean fraction of killed classes.
    """
    if data.task != "classification":
        raise ValueError("class-level score is defined for classification only")
    if not mutants:
        raise ValueError("need at least one mutant instance")
    ref = originals.instances[0]
    ref_ok = predict_correctness(ref, data)
    classes = np.unique(data.labels)
    total = 0.0
    for mut in mutants:
        mut_ok = predict_correctness(mut, data)
        exposed = ref_ok & ~mut_ok
        killed = sum(1 for c in classes if np.any(exposed & (data.labels == c)))
        total += killed / len(classes)
    return total / len(mutants)


def config_score_discrete(
    train_killed: Iterable[Hashable], test_killed: Iterable[Hashable]
) -> float | None:
    """Share of train-killable configurations the test set also kills.

    None when nothing was killable on the training set (score undefined).
    """
    train_set = set(train_killed)
    if not train_set:
        return None
    return len(set(test_killed) & train_set) / len(train_set)


def config_score_boundary(
    boundary_train: float | None, boundary_test: float | None, upper: float
) -> float | None:
    """Killability-boundary mutation score, clamped to [0, 1].

    score = (upper - boundary_test) / (upper - boundary_train).

    A test set whose boundary sits below the training boundary is at least
    as sensitive (score 1); a test set that killed nothing at all (no test
    boundary) scores 0, mirroring the empty intersection of the discrete
    mode.  None only when the score is undefined: no train boundary, or a
    train boundary at the upper bound (division by zero).
    """
    if boundary_train is None:
        return None
    if upper - boundary_train == 0:
        return None
    if boundary_test is None:
        return 0.0
    raw = (upper - boundary_test) / (upper - boundary_train)
    return min(1.0, max(0.0, raw))


def sensitivity(ms_strong: float | None, ms_weak: float | None) -> tuple[float | None, str | None]:
    """Test-set sensitivity: 1 - MS(weak) / MS(strong).

    Returns (value, reason).  An unknown strong score (nothing killable on
    the training set) makes the whole quantity unknowable: reason "U/NK".
    A strong score of zero leaves the ratio undefined: "undefined-div0".
    A weak set that kills nothing (score 0 or unknown) while the strong
    score is positive means the weak set was perfectly blind: value 1.0.
    """
    if ms_strong is None:
        return None, "U/NK"
    if ms_strong == 0:
        return None, "undefined-div0"
    weak = 0.0 if ms_weak is None else ms_weak
    return 1.0 - weak / ms_strong, None


# ---------------------------------------------------------------------------
# weak test sets
# ---------------------------------------------------------------------------


def difficulty_scores(
    originals: OriginalPopulation, data: Dataset, tau: float | None = None
) -> np.ndarray:
    """Per-input easiness for the population; higher = easier.

    Classification: mean true-class probability across instances.
    Regression: negated mean per-input squared error.
    """
    if data.task == "classification":
        acc = np.zeros(data.n, dtype=np.float64)
        for inst in originals.instances:
            probs = class_probabilities(inst, data)
            acc += probs[np.arange(data.n), data.labels]
        return acc / originals.m
    total = np.zeros(data.n, dtype=np.float64)
    for inst in originals.instances:
        out = forward(inst, data.inputs).astype(np.float64)
        total += np.mean((out - data.labels) ** 2, axis=1)
    return -(total / originals.m)


def build_weak_set(
    strong: Dataset,
    originals: OriginalPopulation,
    keep_fraction: float = 0.75,
    easiest: bool = True,
    tau: float | None = None,
) -> Dataset:
    """Subset of the strong test set the originals find easiest.

    Keeps ceil(keep_fraction * N) inputs ranked by population easiness
    (ties broken by input index); ``easiest=False`` keeps the hard end
    instead.  The result is tagged as the weak split and preserves input
    order.
    """
    if not 0 < keep_fraction < 1:
        raise ValueError(f"keep_fraction must be in (0, 1), got {keep_fraction}")
    if keep_fraction * strong.n < 1:
        raise ValueError(
            f"keep_fraction {keep_fraction} of {strong.n} inputs keeps none (q*N < 1)"
        )
    scores = difficulty_scores(originals, strong, tau)
    key = -scores if easiest else scores
    order = np.argsort(key, kind="stable")
    k = math.ceil(keep_fraction * strong.n)
    picked = np.sort(order[:k])
    return strong.take(picked, split="weak_test")


# ---------------------------------------------------------------------------
# per-operator result record
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KillabilityRecord:
    """Everything learned about one operator's searched parameter.

    Killed configurations are carried both as explicit per-dataset config
    lists and, because the searched parameters are declared monotone in
    damage, as scalar kill boundaries.  The boundary form is meaningless
    without that declaration, so asking for a boundary score on a
    non-monotone record is an error rather than a number.
    """

    operator: str
    param: str
    lower: float
    upper: float
    boundary_train: float | None
    archive_size: int
    monotone: bool = True
    boundaries: dict[str, float | None] = field(default_factory=dict)
    killed_configs: dict[str, tuple[float, ...]] = field(default_factory=dict)

    def discrete_score(self, dataset: str) -> float | None:
        return config_score_discrete(
            self.killed_configs.get("train", ()), self.killed_configs.get(dataset, ())
        )

    def boundary_score(self, dataset: str) -> float | None:
        if not self.monotone:
            raise ValueError("boundary score needs a declared monotone parameter")
        return config_score_boundary(self.boundary_train, self.boundaries.get(dataset), self.upper)
