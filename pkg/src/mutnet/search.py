"""Killability-boundary search.

For a mutation operator with a scalar intensity parameter (ratio,
inhibition, or noise scale), the boundary is the smallest value the given
test data can still statistically kill.  The search bisects the parameter
interval; each probe grows a mutant population in batches of m (one mutant
per original) until its metric sample is stable by RSE, then runs the kill
test against the original population's sample.

Probe outcomes drive the bounds:

* unstable  -> upper = mid   (the batch never settled; treat as too noisy
                              to defend, shrink from above)
* killed    -> upper = mid   (mutants archived)
* survived  -> lower = mid

The search stops when the bracket is narrower than ``precision`` or a
timeout fires.  Mutant seeds depend only on (base_seed, original index,
batch number) — not on the probe parameter — so the whole search replays
deterministically and neighboring probes differ only in the parameter.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .model import Dataset, ModelInstance, accuracy
from .operators import OperatorConfig, OperatorError, apply
from .rng import derive_seed
from .stats import (
    DEFAULT_RSE_THRESHOLD,
    EvaluationSample,
    KillResult,
    KillThresholds,
    StabilityReport,
    evaluate_population,
    is_killed,
    rse,
)
from .train import OriginalPopulation

DEFAULT_K_MAX = 5
DEFAULT_PRECISION = 5e-4

_PARAM_OWNERS = {
    "ratio": set(("GF", "WS", "NEB", "NAI", "NS", "WI", "NI")),
    "inhibition": set(("WI", "NI")),
    "noise_sigma": set(("GF",)),
}


@dataclass(frozen=True)
class SearchConfig:
    """What to search and how hard to try."""

    template: OperatorConfig
    param: str = "ratio"
    lower: float = 0.0
    upper: float = 1.0
    k_max: int = DEFAULT_K_MAX
    rse_threshold: float = DEFAULT_RSE_THRESHOLD
    precision: float = DEFAULT_PRECISION
    timeout_s: float | None = None
    thresholds: KillThresholds = field(default_factory=KillThresholds)
    tau: float | None = None

    def __post_init__(self) -> None:
        if self.param not in _PARAM_OWNERS:
            raise ValueError(f"unknown search parameter {self.param!r}")
        if self.template.operator not in _PARAM_OWNERS[self.param]:
            raise ValueError(
                f"parameter {self.param!r} does not apply to operator {self.template.operator}"
            )
        if not self.lower < self.upper:
            raise ValueError(f"need lower < upper, got [{self.lower}, {self.upper}]")
        if self.k_max < 1:
            raise ValueError(f"k_max must be >= 1, got {self.k_max}")
        if not self.precision > 0:
            raise ValueError(f"precision must be > 0, got {self.precision}")
        if self.timeout_s is not None and not self.timeout_s > 0:
            raise ValueError(f"timeout_s must be > 0, got {self.timeout_s}")


@dataclass(frozen=True)
class MutantArchiveEntry:
    """One killed configuration with the population that proved it."""

    config: OperatorConfig
    param: str
    param_value: float
    seeds: tuple[int, ...]
    instances: tuple[ModelInstance, ...]
    sample: EvaluationSample
    stability: StabilityReport
    kill: KillResult
    probe_index: int


@dataclass(frozen=True)
class ProbeRecord:
    index: int
    midpoint: float
    outcome: str  # unstable | killed | survived
    batches: int
    n_generated: int
    n_effort: int  # generated, plus the never-stable penalty batch
    rse: float
    effect_size: float | None
    p_value: float | None
    bounds_after: tuple[float, float]
    rse_trace: tuple[float, ...] = ()


@dataclass(frozen=True)
class SearchTrace:
    param: str
    operator: str
    base_seed: int
    dataset: str
    probes: tuple[ProbeRecord, ...]
    lower: float
    upper: float
    termination: str  # precision | timeout | degenerate
    original_sample: EvaluationSample


@dataclass(frozen=True)
class SearchResult:
    archive: tuple[MutantArchiveEntry, ...]
    trace: SearchTrace

    @property
    def boundary(self) -> float | None:
        """Smallest parameter value the data still killed, if any."""
        if not self.archive:
            return None
        return min(e.param_value for e in self.archive)

    @property
    def n_effort(self) -> int:
        return sum(p.n_effort for p in self.trace.probes)


# ---------------------------------------------------------------------------
# the bisection loop, reusable with any probe
# ---------------------------------------------------------------------------


def bisect(
    probe: Callable[[float], str],
    lower: float,
    upper: float,
    precision: float,
    timeout_s: float | None = None,
) -> tuple[list[tuple[float, str]], float, float, str]:
    """Drive the bounds with a probe returning one of
    'unstable' | 'killed' | 'survived' per midpoint.

    Returns (probe log, final lower, final upper, termination reason).
    The midpoint of step t is always the mean of the bounds then in force.
    """
    if not lower < upper:
        raise ValueError(f"need lower < upper, got [{lower}, {upper}]")
    if not precision > 0:
        raise ValueError(f"precision must be > 0, got {precision}")
    log: list[tuple[float, str]] = []
    started = time.monotonic()
    while upper - lower >= precision:
        mid = (lower + upper) / 2.0
        outcome = probe(mid)
        if outcome not in ("unstable", "killed", "survived"):
            raise ValueError(f"probe returned unknown outcome {outcome!r}")
        log.append((mid, outcome))
        if outcome == "survived":
            lower = mid
        else:
            upper = mid
        if timeout_s is not None and time.monotonic() - started > timeout_s:
            return log, lower, upper, "timeout"
    return log, lower, upper, "precision"


# ---------------------------------------------------------------------------
# mutant batches
# ---------------------------------------------------------------------------


def generate_batch(
    originals: OriginalPopulation,
    cfg: OperatorConfig,
    batch_number: int,
    base_seed: int,
) -> tuple[list[ModelInstance], list[int]]:
    """Mutant batch k: one mutant per original, seeded by
    (base_seed, original index, k).  Seeds ignore cfg entirely."""
    instances, seeds = [], []
    for i, orig in enumerate(originals.instances):
        seed = derive_seed(base_seed, i, batch_number)
        instances.append(apply(orig, cfg, seed))
        seeds.append(seed)
    return instances, seeds


# ---------------------------------------------------------------------------
# the full search
# ---------------------------------------------------------------------------


def binary_search(
    originals: OriginalPopulation,
    cfg: SearchConfig,
    data: Dataset,
    base_seed: int,
) -> SearchResult:
    """Find the killability boundary of cfg's parameter on ``data``.

    Deterministic in (originals, cfg, data, base_seed).  The archive holds
    every killed probe in discovery order; the boundary estimate is the
    smallest archived parameter value.
    """
    original_sample = evaluate_population(originals.instances, data, tau=cfg.tau)
    m = originals.m

    archive: list[MutantArchiveEntry] = []
    records: list[ProbeRecord] = []
    state = {"index": 0, "lower": cfg.lower, "upper": cfg.upper}

    def probe(mid: float) -> str:
        probe_cfg = cfg.template.with_value(cfg.param, mid)
        population = f"{cfg.template.operator}:{cfg.param}={mid:.12g}"
        values: list[float] = []
        instances: list[ModelInstance] = []
        seeds: list[int] = []
        sample = None
        batches = 0
        for k in range(1, cfg.k_max + 1):
            batch, batch_seeds = generate_batch(originals, probe_cfg, k, base_seed)
            instances.extend(batch)
            seeds.extend(batch_seeds)
            values.extend(accuracy(inst, data, cfg.tau) for inst in batch)
            batches = k
            sample = EvaluationSample(
                np.array(values), dataset=data.split, population=population, n=k
            )
            report = rse(sample, cfg.rse_threshold)
            if report.stable:
                break
        n_generated = len(values)
        if not report.stable:
            outcome, kill = "unstable", None
            n_effort = (cfg.k_max + 1) * m
        else:
            kill = is_killed(sample, original_sample, cfg.thresholds)
            outcome = "killed" if kill.killed else "survived"
            n_effort = n_generated
            if kill.killed:
                archive.append(
                    MutantArchiveEntry(
                        config=probe_cfg,
                        param=cfg.param,
                        param_value=mid,
                        seeds=tuple(seeds),
                        instances=tuple(instances),
                        sample=sample,
                        stability=report,
                        kill=kill,
                        probe_index=state["index"],
                    )
                )
        if outcome == "survived":
            state["lower"] = mid
        else:
            state["upper"] = mid
        records.append(
            ProbeRecord(
                index=state["index"],
                midpoint=mid,
                outcome=outcome,
                batches=batches,
                n_generated=n_generated,
                n_effort=n_effort,
                rse=report.rse,
                effect_size=None if kill is None else kill.effect_size,
                p_value=None if kill is None else kill.p_value,
                bounds_after=(state["lower"], state["upper"]),
                rse_trace=report.trace,
            )
        )
        state["index"] += 1
        return outcome

    _, lower, upper, termination = bisect(
        probe, cfg.lower, cfg.upper, cfg.precision, cfg.timeout_s
    )
    trace = SearchTrace(
        param=cfg.param,
        operator=cfg.template.operator,
        base_seed=int(base_seed),
        dataset=data.split,
        probes=tuple(records),
        lower=lower,
        upper=upper,
        termination=termination,
        original_sample=original_sample,
    )
    return SearchResult(archive=tuple(archive), trace=trace)


# ---------------------------------------------------------------------------
# archive re-evaluation on other datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ArchiveEvaluation:
    param_value: float
    stability: StabilityReport
    kill: KillResult


def reevaluate_archive(
    archive: Sequence[MutantArchiveEntry],
    originals: OriginalPopulation,
    data: Dataset,
    thresholds: KillThresholds = KillThresholds(),
    rse_threshold: float = DEFAULT_RSE_THRESHOLD,
    tau: float | None = None,
) -> list[ArchiveEvaluation]:
    """Re-run the kill test for archived mutants on another dataset.

    The archived instances are reused as-is (no regeneration), so this is
    the discrete mutation-score path: which killed-on-train configurations
    does this dataset also kill?
    """
    original_sample = evaluate_population(originals.instances, data, tau=tau)
    out = []
    for entry in archive:
        sample = evaluate_population(
            entry.instances,
            data,
            tau=tau,
            n_batches=len(entry.instances) // originals.m,
        )
        out.append(
            ArchiveEvaluation(
                param_value=entry.param_value,
                stability=rse(sample, rse_threshold),
                kill=is_killed(sample, original_sample, thresholds),
            )
        )
    return out
