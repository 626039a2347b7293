"""Command-line pipeline: train / search / score / spectra / report / predict.

All stages share one artifacts directory (``--out``) and one JSON run
config.  Stages communicate only through files, so any stage can be re-run
in isolation and the whole pipeline replays deterministically from
``(config, seed)``.  Wall-clock timings live exclusively in
``timings.json``, the ``timings`` block of ``report.json`` and
``timings.csv``; every other artifact is a pure function of config and
seed and regenerates bit-identically.

Exit codes: 0 success, 2 bad config or arguments, 3 nothing killable
(every operator's training-set archive came back empty), 4 runtime
failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import datasets as dsets
from .io import (
    FormatError,
    load_dataset,
    load_model,
    save_dataset,
    save_model,
    write_json_atomic,
)
from .model import (
    Dataset,
    ModelError,
    ModelGraph,
    ModelInstance,
    dense,
    forward,
    predict_correctness,
)
from .operators import OperatorConfig, OperatorError, apply
from .rng import derive_seed
from .search import SearchConfig, SearchResult, binary_search
from .stats import (
    KillThresholds,
    build_weak_set,
    config_score_boundary,
    config_score_discrete,
    disagreement_rate,
    evaluate_population,
    is_killed,
    mutation_score_class_level,
    rse,
    sensitivity,
)
from .spectral import (
    compare_groups,
    default_spectrum_layer,
    default_value_range,
    extract_spectrum,
    sample_inputs,
)
from .train import OriginalPopulation, TrainingConfig, train_population


class ConfigError(ValueError):
    """Bad run configuration or command arguments (exit code 2)."""


class EmptyArchiveError(RuntimeError):
    """No operator produced any killable configuration (exit code 3)."""


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

DEFAULT_SEARCH = {
    "lower": 0.0,
    "upper": 1.0,
    "k_max": 5,
    "rse_threshold": 0.05,
    "precision": 5e-4,
    "timeout_s": None,
    "alpha": 0.05,
    "beta": 0.5,
}

DEFAULT_CONFIG = {
    "seed": 0,
    "dataset": {
        "kind": "blobs",  # blobs | surface | dir
        "path": None,
        "test_path": None,
        "n_classes": 10,
        "n_per_class": 200,
        "spread": 0.15,
        "n": 1000,
        "noise": 0.05,
    },
    "model": {
        "hidden": [64, 64],
        "activation": "relu",
        "layers": None,  # explicit layer specs override `hidden`
    },
    "training": {
        "m": 20,
        "epochs": 30,
        "batch_size": 32,
        "learning_rate": 0.05,
        "momentum": 0.9,
        "optimizer": "sgd_momentum",
        "loss": "cross_entropy",
    },
    "operators": [
        {"operator": "WI", "ratio": 0.05, "search": "inhibition"},
        {"operator": "NI", "ratio": 0.05, "search": "inhibition"},
        {"operator": "NAI", "search": "ratio"},
        {"operator": "GF", "noise_sigma": 0.5, "search": "ratio"},
    ],
    "search": dict(DEFAULT_SEARCH),
    "weak": {"keep_fraction": 0.75, "easiest": True},
    "spectra": {
        "bins": 100,
        "sample_fraction": 0.1,
        "percentile": 99.9,
        "max_instances": 20,
        "layer": None,
    },
    "tau": None,
}

_SCALARS = (int, float, str, bool, type(None))


def _merge(base, override, path=""):
    if isinstance(base, dict):
        if not isinstance(override, dict):
            raise ConfigError(f"config key {path or '<root>'} must be an object")
        out = dict(base)
        for key, value in override.items():
            if key not in base:
                raise ConfigError(f"unknown config key {path + key!r}")
            out[key] = _merge(base[key], value, path + key + ".")
        return out
    if isinstance(base, list):
        if not isinstance(override, list):
            raise ConfigError(f"config key {path[:-1]!r} must be a list")
        return override
    if not isinstance(override, _SCALARS):
        raise ConfigError(f"config key {path[:-1]!r} must be a scalar")
    return override


def _apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects dotted.path=JSON, got {assignment!r}")
    dotted, _, raw = assignment.partition("=")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # allow bare strings
    node = cfg
    parts = dotted.strip().split(".")
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[leaf] = value


def load_run_config(
    config_path: str | None = None,
    overrides: list[str] | None = None,
    seed: int | None = None,
) -> dict:
    """Defaults, overlaid with the config file, --set overrides, then --seed."""
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    if config_path is not None:
        try:
            user = json.loads(Path(config_path).read_text("utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {config_path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = _merge(cfg, user)
    for assignment in overrides or []:
        _apply_override(cfg, assignment)
    if seed is not None:
        cfg["seed"] = int(seed)
    _validate_config(cfg)
    return cfg


def _validate_config(cfg: dict) -> None:
    try:
        _training_config(cfg)
        if int(cfg["training"]["m"]) < 2:
            raise ConfigError("training.m must be >= 2")
        for spec in _operator_specs(cfg):
            pass
        kind = cfg["dataset"]["kind"]
        if kind not in ("blobs", "surface", "dir"):
            raise ConfigError(f"unknown dataset kind {kind!r}")
        if kind == "dir" and not cfg["dataset"]["path"]:
            raise ConfigError("dataset.kind 'dir' needs dataset.path")
        weak = cfg["weak"]
        if not 0 < float(weak["keep_fraction"]) < 1:
            raise ConfigError("weak.keep_fraction must be in (0, 1)")
        sp = cfg["spectra"]
        if int(sp["bins"]) < 2:
            raise ConfigError("spectra.bins must be >= 2")
        if not 0 < float(sp["sample_fraction"]) <= 1:
            raise ConfigError("spectra.sample_fraction must be in (0, 1]")
        s = cfg["search"]
        if not float(s["lower"]) < float(s["upper"]):
            raise ConfigError("search.lower must be < search.upper")
        KillThresholds(alpha=float(s["alpha"]), beta=float(s["beta"]))
    except ConfigError:
        raise
    except (ValueError, OperatorError, KeyError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def _training_config(cfg: dict) -> TrainingConfig:
    t = dict(cfg["training"])
    t.pop("m", None)
    try:
        return TrainingConfig.from_dict(t)
    except ValueError as exc:
        raise ConfigError(f"training: {exc}") from exc


def _operator_specs(cfg: dict) -> list[tuple[OperatorConfig, str]]:
    """(template, searched parameter) per configured operator."""
    out = []
    seen = set()
    for obj in cfg["operators"]:
        if not isinstance(obj, dict):
            raise ConfigError("operators entries must be objects")
        obj = dict(obj)
        param = obj.pop("search", None)
        try:
            template = OperatorConfig.from_dict(obj)
        except OperatorError as exc:
            raise ConfigError(str(exc)) from exc
        if param is None:
            param = "inhibition" if template.operator in ("WI", "NI") else "ratio"
        if template.operator in seen:
            raise ConfigError(f"operator {template.operator} listed twice")
        seen.add(template.operator)
        out.append((template, param))
    if not out:
        raise ConfigError("at least one operator is required")
    return out


def _search_config(cfg: dict, template: OperatorConfig, param: str) -> SearchConfig:
    s = cfg["search"]
    try:
        return SearchConfig(
            template=template,
            param=param,
            lower=float(s["lower"]),
            upper=float(s["upper"]),
            k_max=int(s["k_max"]),
            rse_threshold=float(s["rse_threshold"]),
            precision=float(s["precision"]),
            timeout_s=None if s["timeout_s"] is None else float(s["timeout_s"]),
            thresholds=KillThresholds(alpha=float(s["alpha"]), beta=float(s["beta"])),
            tau=None if cfg["tau"] is None else float(cfg["tau"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# artifact plumbing
# ---------------------------------------------------------------------------


def _record_timing(out: Path, stage: str, payload: dict) -> None:
    path = out / "timings.json"
    timings = {}
    if path.is_file():
        timings = json.loads(path.read_text("utf-8"))
    timings[stage] = payload
    write_json_atomic(path, timings)


def _write_csv(path: Path, header: tuple[str, ...], rows: list[tuple]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _marker(value: float | None, reason: str | None = None):
    if value is None:
        return reason or "U/NK"
    return value


def _build_datasets(cfg: dict) -> tuple[Dataset, Dataset]:
    d = cfg["dataset"]
    seed = derive_seed(int(cfg["seed"]), 1)
    if d["kind"] == "blobs":
        return dsets.make_synthetic_classification(
            n_classes=int(d["n_classes"]),
            n_per_class=int(d["n_per_class"]),
            spread=float(d["spread"]),
            seed=seed,
        )
    if d["kind"] == "surface":
        return dsets.make_synthetic_regression(n=int(d["n"]), noise=float(d["noise"]), seed=seed)
    train = load_dataset(d["path"])
    if not d["test_path"]:
        raise ConfigError("dataset.kind 'dir' needs dataset.test_path")
    test = load_dataset(d["test_path"])
    return train, test


def _build_graph(cfg: dict, train: Dataset) -> ModelGraph:
    m = cfg["model"]
    input_shape = tuple(train.inputs.shape[1:])
    if m["layers"] is not None:
        from .io import _layer_from_json

        layers = tuple(_layer_from_json(obj, i) for i, obj in enumerate(m["layers"]))
        return ModelGraph(layers, input_shape, task=train.task)
    if len(input_shape) != 1:
        raise ConfigError("model.hidden needs flat inputs; give explicit model.layers instead")
    if train.task == "classification":
        out_dim = int(train.labels.max()) + 1
        out_act = "softmax"
    else:
        out_dim = int(train.labels.shape[1])
        out_act = "linear"
    widths = [int(w) for w in m["hidden"]]
    if any(w < 1 for w in widths):
        raise ConfigError("model.hidden widths must be >= 1")
    layers = []
    fan_in = input_shape[0]
    for w in widths:
        layers.append(dense(fan_in, w, activation=m["activation"]))
        fan_in = w
    layers.append(dense(fan_in, out_dim, activation=out_act))
    return ModelGraph(tuple(layers), input_shape, task=train.task)


def _load_artifacts(out: Path) -> tuple[OriginalPopulation, Dataset, Dataset]:
    pop_path = out / "originals" / "population.json"
    if not pop_path.is_file():
        raise FileNotFoundError(f"no trained population under {out}; run `train` first")
    pop = json.loads(pop_path.read_text("utf-8"))
    instances = [
        load_model(out / "originals" / f"model_{i:03d}") for i in range(int(pop["m"]))
    ]
    try:
        config = TrainingConfig.from_dict(pop["training"])
    except ValueError:
        config = None
    originals = OriginalPopulation(
        graph=instances[0].graph,
        instances=tuple(instances),
        seeds=tuple(pop["seeds"]),
        config=config,
        loss_curves=tuple(tuple(c) for c in pop["loss_curves"]),
    )
    train = load_dataset(out / "datasets" / "train")
    strong = load_dataset(out / "datasets" / "strong_test")
    return originals, train, strong


# Datasets every search/score stage covers, in fixed order.
_EVAL_DATASETS = ("train", "strong_test", "weak_test")


def _archive_dir(out: Path, dataset: str, operator: str) -> Path:
    return out / "search" / dataset / operator


def _regenerate_entry_instances(
    originals: OriginalPopulation, entry: dict, limit: int | None = None
) -> list[ModelInstance]:
    """Rebuild a persisted archive entry's mutants from config + seeds.

    Seed order is batch-major: seed j belongs to original j mod m.
    """
    cfg = OperatorConfig.from_dict(entry["config"])
    seeds = entry["seeds"] if limit is None else entry["seeds"][:limit]
    m = originals.m
    return [apply(originals.instances[j % m], cfg, seed) for j, seed in enumerate(seeds)]


def _load_entry_instances(entry: dict, limit: int | None = None) -> list[ModelInstance]:
    """Load an archive entry's persisted mutant instances."""
    entry_dir = Path(entry["entry_dir"])
    names = entry["instances"] if limit is None else entry["instances"][:limit]
    return [load_model(entry_dir / name) for name in names]


def _load_search_results(out: Path, cfg: dict, dataset: str = "train") -> dict[str, dict]:
    """Per-operator search trace plus its archive entries, from disk."""
    results = {}
    missing = []
    for template, _param in _operator_specs(cfg):
        trace_path = _archive_dir(out, dataset, template.operator) / "trace.json"
        if not trace_path.is_file():
            missing.append(str(trace_path))
            continue
        payload = json.loads(trace_path.read_text("utf-8"))
        entries = []
        for ref in payload["archive"]:
            entry_dir = trace_path.parent / ref["entry"]
            entry = json.loads((entry_dir / "entry.json").read_text("utf-8"))
            entry["entry_dir"] = str(entry_dir)
            entries.append(entry)
        payload["entries"] = entries
        results[template.operator] = payload
    if missing:
        raise FileNotFoundError(
            "missing search results (run `search` first): " + ", ".join(missing)
        )
    return results


def _persist_search(archive_dir: Path, result: SearchResult, scfg: SearchConfig, m: int) -> None:
    """Write one search as trace.json + entry_NNN/entry.json + model dirs.

    The directory is rebuilt from scratch so stale entries from an earlier
    run cannot leak into the new archive.
    """
    if archive_dir.exists():
        shutil.rmtree(archive_dir)
    refs = []
    for i, e in enumerate(result.archive):
        entry_name = f"entry_{i:03d}"
        entry_dir = archive_dir / entry_name
        instance_names = []
        for j, inst in enumerate(e.instances):
            name = f"instance_{j:03d}"
            save_model(inst, entry_dir / name)
            instance_names.append(name)
        write_json_atomic(
            entry_dir / "entry.json",
            {
                "param": e.param,
                "param_value": e.param_value,
                "probe_index": e.probe_index,
                "config": e.config.to_dict(),
                "seeds": list(e.seeds),
                "original_indices": [j % m for j in range(len(e.seeds))],
                "instances": instance_names,
                "mean": float(e.sample.values.mean()),
                "rse": e.stability.rse,
                "rse_trace": list(e.stability.trace),
                "effect_size": None if math.isinf(e.kill.effect_size) else e.kill.effect_size,
                "effect_size_infinite": math.isinf(e.kill.effect_size),
                "p_value": e.kill.p_value,
            },
        )
        refs.append(
            {"entry": entry_name, "param_value": e.param_value, "probe_index": e.probe_index}
        )
    payload = _search_trace_to_json(result, scfg)
    payload["archive"] = refs
    write_json_atomic(archive_dir / "trace.json", payload)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def cmd_train(cfg: dict, out: Path) -> dict:
    """Build datasets, train the original population, persist everything."""
    started = time.monotonic()
    train, strong = _build_datasets(cfg)
    graph = _build_graph(cfg, train)
    tcfg = _training_config(cfg)
    m = int(cfg["training"]["m"])
    base_seed = derive_seed(int(cfg["seed"]), 2)
    originals = train_population(graph, train, tcfg, m, base_seed)

    out.mkdir(parents=True, exist_ok=True)
    write_json_atomic(out / "config.json", cfg)
    save_dataset(train, out / "datasets" / "train")
    save_dataset(strong, out / "datasets" / "strong_test")
    for i, inst in enumerate(originals.instances):
        save_model(inst, out / "originals" / f"model_{i:03d}")
    tau = None if cfg["tau"] is None else float(cfg["tau"])
    summary = {
        "m": m,
        "seeds": list(originals.seeds),
        "training": tcfg.to_dict(),
        "loss_curves": [list(c) for c in originals.loss_curves],
        "train_accuracy": originals.accuracies(train, tau).tolist(),
        "strong_test_accuracy": originals.accuracies(strong, tau).tolist(),
        "n_params": graph.n_params,
    }
    write_json_atomic(out / "originals" / "population.json", summary)
    _record_timing(out, "train", {"seconds": time.monotonic() - started})
    return summary


def _search_trace_to_json(result: SearchResult, scfg: SearchConfig) -> dict:
    return {
        "operator": scfg.template.operator,
        "param": scfg.param,
        "dataset": result.trace.dataset,
        "lower": scfg.lower,
        "upper": scfg.upper,
        "k_max": scfg.k_max,
        "rse_threshold": scfg.rse_threshold,
        "precision": scfg.precision,
        "alpha": scfg.thresholds.alpha,
        "beta": scfg.thresholds.beta,
        "boundary": result.boundary,
        "termination": result.trace.termination,
        "final_bounds": [result.trace.lower, result.trace.upper],
        "base_seed": result.trace.base_seed,
        "original_mean": float(result.trace.original_sample.values.mean()),
        "n_effort": result.n_effort,
        "seed_policy": (
            "instance seeds derive from (base_seed, original index, batch number) only, "
            "so searches on other datasets reuse identical mutants at equal midpoints"
        ),
        "probes": [
            {
                "index": p.index,
                "midpoint": p.midpoint,
                "outcome": p.outcome,
                "batches": p.batches,
                "n_generated": p.n_generated,
                "n_effort": p.n_effort,
                "rse": None if math.isinf(p.rse) else p.rse,
                "rse_trace": [None if math.isinf(r) else r for r in p.rse_trace],
                "effect_size": (
                    None
                    if p.effect_size is None or math.isinf(p.effect_size)
                    else p.effect_size
                ),
                "effect_size_infinite": p.effect_size is not None and math.isinf(p.effect_size),
                "p_value": p.p_value,
                "bounds_after": list(p.bounds_after),
            }
            for p in result.trace.probes
        ],
    }


def cmd_search(cfg: dict, out: Path) -> dict:
    """Bisect every operator's parameter on the train, strong and weak sets.

    The weak set is carved out of the strong test set first (it only
    depends on the originals), then each (operator, dataset) search is
    persisted as its own archive directory.  All three datasets share one
    base seed per operator, so a parameter value probed twice always
    denotes the same mutant population.
    """
    originals, train, strong = _load_artifacts(out)
    tau = None if cfg["tau"] is None else float(cfg["tau"])
    weak = build_weak_set(
        strong,
        originals,
        keep_fraction=float(cfg["weak"]["keep_fraction"]),
        easiest=bool(cfg["weak"]["easiest"]),
        tau=tau,
    )
    save_dataset(weak, out / "datasets" / "weak_test")
    eval_sets = {"train": train, "strong_test": strong, "weak_test": weak}

    timing: dict[str, dict] = {}
    summary: dict[str, dict] = {}
    for template, param in _operator_specs(cfg):
        op = template.operator
        scfg = _search_config(cfg, template, param)
        base_seed = derive_seed(int(cfg["seed"]), 3, _op_tag(op))
        timing[op] = {}
        summary[op] = {}
        train_generated = 0
        for name in _EVAL_DATASETS:
            started = time.monotonic()
            result = binary_search(originals, scfg, eval_sets[name], base_seed)
            seconds = time.monotonic() - started
            _persist_search(_archive_dir(out, name, op), result, scfg, originals.m)
            generated = sum(p.n_generated for p in result.trace.probes)
            if name == "train":
                train_generated = generated
            timing[op][name] = {"seconds": seconds, "instances_generated": generated}
            summary[op][name] = {
                "boundary": result.boundary,
                "archive_size": len(result.archive),
                "probes": len(result.trace.probes),
            }
        train_seconds = timing[op]["train"]["seconds"]
        timing[op]["seconds_per_mutant"] = (
            train_seconds / train_generated if train_generated else None
        )
    _record_timing(out, "search", timing)
    if all(row["train"]["archive_size"] == 0 for row in summary.values()):
        raise EmptyArchiveError(
            "no operator produced a killable stable configuration on the training set"
        )
    return summary


def _op_tag(operator: str) -> int:
    return OPERATOR_TAGS[operator]


OPERATOR_TAGS = {op: i + 1 for i, op in enumerate(("GF", "WS", "NEB", "NAI", "NS", "WI", "NI"))}


def cmd_score(cfg: dict, out: Path) -> dict:
    """Score the test sets against the persisted searches.

    Boundary-mode scores compare each dataset's own kill boundary (from
    its persisted search) with the training one; discrete-mode scores
    re-evaluate the train-archived mutant populations — loaded back from
    the archive directories — on the strong and weak sets.
    """
    started = time.monotonic()
    originals, train, strong = _load_artifacts(out)
    weak_dir = out / "datasets" / "weak_test"
    if not weak_dir.is_dir():
        raise FileNotFoundError(f"no weak test set under {out}; run `search` first")
    weak = load_dataset(weak_dir)
    searches = {
        name: _load_search_results(out, cfg, dataset=name) for name in _EVAL_DATASETS
    }
    if all(not r["entries"] for r in searches["train"].values()):
        raise EmptyArchiveError(
            "no operator produced a killable configuration on the training set"
        )
    tau = None if cfg["tau"] is None else float(cfg["tau"])

    eval_sets = {"strong_test": strong, "weak_test": weak}
    origin_correct_train = np.stack(
        [predict_correctness(inst, train, tau) for inst in originals.instances]
    )
    origin_correct = np.stack(
        [predict_correctness(inst, strong, tau) for inst in originals.instances]
    )
    scores: dict = {
        "weak_set": {
            "n": weak.n,
            "of": strong.n,
            "keep_fraction": float(cfg["weak"]["keep_fraction"]),
        },
        "disagreement_originals": disagreement_rate(origin_correct),
        "disagreement_originals_train": disagreement_rate(origin_correct_train),
        "operators": {},
    }
    timing: dict[str, dict] = {}

    for template, param in _operator_specs(cfg):
        op = template.operator
        op_start = time.monotonic()
        scfg = _search_config(cfg, template, param)
        entries = searches["train"][op]["entries"]

        # boundary mode: each dataset's own persisted search
        boundaries: dict[str, float | None] = {
            name: searches[name][op]["boundary"] for name in _EVAL_DATASETS
        }
        boundary_train = boundaries["train"]

        # discrete mode: re-evaluate train-archived populations per test set
        killed_configs: dict[str, tuple[float, ...]] = {
            "train": tuple(e["param_value"] for e in entries)
        }
        per_entry: dict[str, list] = {name: [] for name in eval_sets}
        archived = [_load_entry_instances(e) for e in entries]
        for name, data in eval_sets.items():
            original_sample = evaluate_population(originals.instances, data, tau=tau)
            killed: list[float] = []
            for entry, instances in zip(entries, archived):
                sample = evaluate_population(
                    instances, data, tau=tau, n_batches=len(instances) // originals.m
                )
                kill = is_killed(sample, original_sample, scfg.thresholds)
                stability = rse(sample, scfg.rse_threshold)
                per_entry[name].append(
                    {
                        "param_value": entry["param_value"],
                        "killed": kill.killed,
                        "effect_size": None
                        if math.isinf(kill.effect_size)
                        else kill.effect_size,
                        "p_value": kill.p_value,
                        "rse": None if math.isinf(stability.rse) else stability.rse,
                    }
                )
                if kill.killed:
                    killed.append(entry["param_value"])
            killed_configs[name] = tuple(killed)

        ms_discrete = {
            name: config_score_discrete(killed_configs["train"], killed_configs[name])
            for name in eval_sets
        }
        ms_boundary = {
            name: config_score_boundary(boundary_train, boundaries[name], scfg.upper)
            for name in eval_sets
        }
        sens_boundary, sb_reason = sensitivity(ms_boundary["strong_test"], ms_boundary["weak_test"])
        sens_discrete, sd_reason = sensitivity(ms_discrete["strong_test"], ms_discrete["weak_test"])

        # class-level score and disagreement at the boundary entry
        class_level = None
        disagreement_mut = None
        if entries:
            lowest = min(entries, key=lambda e: e["param_value"])
            boundary_instances = _load_entry_instances(lowest, limit=originals.m)
            if strong.task == "classification":
                class_level = mutation_score_class_level(originals, boundary_instances, strong)
            mut_correct = np.stack(
                [predict_correctness(inst, strong, tau) for inst in boundary_instances]
            )
            disagreement_mut = disagreement_rate(np.concatenate([origin_correct, mut_correct]))

        scores["operators"][op] = {
            "param": param,
            "archive_size": len(entries),
            "boundaries": {k: _marker(v) for k, v in boundaries.items()},
            "ms_discrete": {k: _marker(v) for k, v in ms_discrete.items()},
            "ms_boundary": {k: _marker(v) for k, v in ms_boundary.items()},
            "sensitivity": _marker(sens_boundary, sb_reason),
            "sensitivity_discrete": _marker(sens_discrete, sd_reason),
            "class_level_ms_boundary_mutants": _marker(class_level),
            "disagreement_with_boundary_mutants": _marker(disagreement_mut),
            "per_entry": per_entry,
        }
        timing[op] = {"seconds": time.monotonic() - op_start}

    write_json_atomic(out / "scores" / "scores.json", scores)
    timing["total_seconds"] = time.monotonic() - started
    _record_timing(out, "score", timing)
    return scores


def cmd_spectra(cfg: dict, out: Path) -> dict:
    """Activation-spectrum distances: originals vs boundary mutants.

    Writes ``spectra/spectra.json`` plus ``spectra/distances.csv`` holding
    the raw within/cross distance distributions for external plotting.
    """
    started = time.monotonic()
    originals, train, strong = _load_artifacts(out)
    results = _load_search_results(out, cfg, dataset="train")
    sp = cfg["spectra"]
    sample = sample_inputs(
        strong, float(sp["sample_fraction"]), derive_seed(int(cfg["seed"]), 4)
    )
    layers = sp["layer"]
    if layers is None:
        layers = [default_spectrum_layer(originals.graph)]
    elif isinstance(layers, list):
        layers = [int(i) for i in layers]
    else:
        layers = [int(layers)]
    bins = int(sp["bins"])
    value_range = default_value_range(
        originals.instances, sample.inputs, layers, percentile=float(sp["percentile"])
    )
    max_instances = int(sp["max_instances"])

    original_profiles = [
        extract_spectrum([inst], sample.inputs, layers, bins, value_range, tag=f"orig_{i}")
        for i, inst in enumerate(originals.instances[:max_instances])
    ]
    payload = {
        "layers": layers,
        "bins": bins,
        "value_range": list(value_range),
        "sample_n": sample.n,
        "groups": {},
    }
    csv_rows: list[tuple[str, str, float]] = []
    for template, _param in _operator_specs(cfg):
        op = template.operator
        entries = results[op]["entries"]
        if not entries:
            payload["groups"][op] = {"status": "empty archive"}
            continue
        lowest = min(entries, key=lambda e: e["param_value"])
        mutants = _load_entry_instances(lowest, limit=max_instances)
        mutant_profiles = [
            extract_spectrum([inst], sample.inputs, layers, bins, value_range, tag=f"{op}_{i}")
            for i, inst in enumerate(mutants)
        ]
        comparison = compare_groups(original_profiles, mutant_profiles)
        payload["groups"][op] = {
            "param_value": lowest["param_value"],
            "n_mutants": len(mutant_profiles),
            "within_originals_mean": comparison.within_a_mean,
            "within_mutants_mean": comparison.within_b_mean,
            "cross_mean": comparison.cross_mean,
            "separation": (
                None
                if comparison.within_a_mean is None or comparison.cross_mean is None
                else comparison.cross_mean - comparison.within_a_mean
            ),
            "summary": comparison.summary(),
        }
        csv_rows += [(op, "within_originals", d) for d in comparison.within_a]
        csv_rows += [(op, "within_mutants", d) for d in comparison.within_b]
        csv_rows += [(op, "cross", d) for d in comparison.cross]
    write_json_atomic(out / "spectra" / "spectra.json", payload)
    _write_csv(
        out / "spectra" / "distances.csv",
        ("operator", "distribution", "distance"),
        csv_rows,
    )
    _record_timing(out, "spectra", {"seconds": time.monotonic() - started})
    return payload


def cmd_report(cfg: dict, out: Path) -> dict:
    """Merge stage outputs into report.json, report.md and CSV tables.

    CSVs: ``stability.csv`` (instances needed per probe), ``sensitivity.csv``
    (scores per operator), ``disagreement.csv``, ``timings.csv`` (seconds
    per generated mutant).  Everything except the timings is a pure
    function of (config, seed).
    """
    missing = []
    config_path = out / "config.json"
    if not config_path.is_file():
        raise FileNotFoundError(
            f"no artifacts in {out}; missing fragments: {config_path} (run the pipeline first)"
        )
    stored_cfg = json.loads(config_path.read_text("utf-8"))
    pop_path = out / "originals" / "population.json"
    scores_path = out / "scores" / "scores.json"
    for path in (pop_path, scores_path):
        if not path.is_file():
            missing.append(str(path))
    per_dataset: dict[str, dict] = {}
    try:
        per_dataset = {
            name: _load_search_results(out, stored_cfg, dataset=name)
            for name in _EVAL_DATASETS
        }
    except FileNotFoundError as exc:
        missing.append(str(exc))
    if missing:
        raise FileNotFoundError("missing fragments: " + "; ".join(missing))
    population = json.loads(pop_path.read_text("utf-8"))
    scores = json.loads(scores_path.read_text("utf-8"))
    spectra_path = out / "spectra" / "spectra.json"
    spectra = json.loads(spectra_path.read_text("utf-8")) if spectra_path.is_file() else None
    timings_path = out / "timings.json"
    timings = json.loads(timings_path.read_text("utf-8")) if timings_path.is_file() else {}

    operators = {}
    stability_rows = []
    for op, payload in per_dataset["train"].items():
        probes = payload["probes"]
        n_unstable = sum(1 for p in probes if p["outcome"] == "unstable")
        operators[op] = {
            "param": payload["param"],
            "boundary_train": _marker(payload["boundary"]),
            "termination": payload["termination"],
            "probes": len(probes),
            "unstable_probes": n_unstable,
            "mean_instances_per_probe": (
                sum(p["n_effort"] for p in probes) / len(probes) if probes else None
            ),
            "archive_size": len(payload["entries"]),
            "scores": scores["operators"].get(op),
            "spectra": None if spectra is None else spectra["groups"].get(op),
        }
        for name in _EVAL_DATASETS:
            trace = per_dataset[name][op]
            t_probes = trace["probes"]
            stability_rows.append(
                (
                    op,
                    name,
                    len(t_probes),
                    sum(1 for p in t_probes if p["outcome"] == "unstable"),
                    (
                        round(sum(p["n_effort"] for p in t_probes) / len(t_probes), 6)
                        if t_probes
                        else ""
                    ),
                    "" if trace["boundary"] is None else trace["boundary"],
                )
            )

    report = {
        "config": stored_cfg,
        "population": {
            "m": population["m"],
            "n_params": population["n_params"],
            "train_accuracy_mean": float(np.mean(population["train_accuracy"])),
            "strong_test_accuracy_mean": float(np.mean(population["strong_test_accuracy"])),
        },
        "weak_set": scores["weak_set"],
        "disagreement_originals": scores["disagreement_originals"],
        "disagreement_originals_train": scores.get("disagreement_originals_train"),
        "operators": operators,
        "timings": timings,
    }
    write_json_atomic(out / "report.json", report)
    (out / "report.md").write_text(_render_markdown(report), "utf-8")

    _write_csv(
        out / "stability.csv",
        ("operator", "dataset", "probes", "unstable_probes", "mean_instances_per_probe", "boundary"),
        stability_rows,
    )
    sensitivity_rows = []
    for op, row in operators.items():
        sc = row["scores"] or {}
        msb = sc.get("ms_boundary", {})
        msd = sc.get("ms_discrete", {})
        sensitivity_rows.append(
            (
                op,
                _fmt(msb.get("strong_test")),
                _fmt(msb.get("weak_test")),
                _fmt(sc.get("sensitivity")),
                _fmt(msd.get("strong_test")),
                _fmt(msd.get("weak_test")),
                _fmt(sc.get("sensitivity_discrete")),
            )
        )
    _write_csv(
        out / "sensitivity.csv",
        (
            "operator",
            "ms_strong_boundary",
            "ms_weak_boundary",
            "sensitivity_boundary",
            "ms_strong_discrete",
            "ms_weak_discrete",
            "sensitivity_discrete",
        ),
        sensitivity_rows,
    )
    disagreement_rows = [
        ("originals", "train", _fmt(scores.get("disagreement_originals_train"))),
        ("originals", "strong_test", _fmt(scores["disagreement_originals"])),
    ]
    for op, row in operators.items():
        sc = row["scores"] or {}
        disagreement_rows.append(
            (f"originals+{op}_boundary_mutants", "strong_test", _fmt(sc.get("disagreement_with_boundary_mutants")))
        )
    _write_csv(out / "disagreement.csv", ("population", "dataset", "rate"), disagreement_rows)

    timing_rows = []
    for stage, payload in timings.items():
        if not isinstance(payload, dict):
            continue
        if "seconds" in payload:
            timing_rows.append((stage, "", payload["seconds"], "", ""))
            continue
        for scope, item in payload.items():
            if isinstance(item, dict):
                if "seconds" in item:  # score-stage per-operator entries
                    timing_rows.append((stage, scope, item["seconds"], "", ""))
                else:  # search-stage per-operator per-dataset entries
                    for ds, cell in item.items():
                        if isinstance(cell, dict):
                            timing_rows.append(
                                (
                                    stage,
                                    f"{scope}/{ds}",
                                    cell.get("seconds", ""),
                                    cell.get("instances_generated", ""),
                                    "",
                                )
                            )
                    spm = item.get("seconds_per_mutant")
                    if spm is not None:
                        timing_rows.append((stage, scope, "", "", spm))
            elif scope == "total_seconds":
                timing_rows.append((stage, "total", item, "", ""))
    _write_csv(
        out / "timings.csv",
        ("stage", "scope", "seconds", "instances_generated", "seconds_per_mutant"),
        timing_rows,
    )
    return report


def _fmt(value, digits=6):
    if value is None:
        return "U/NK"
    if isinstance(value, str):
        return value
    if isinstance(value, float):
        return f"{value:.{digits}g}"
    return str(value)


def _render_markdown(report: dict) -> str:
    lines = ["# Mutation-testing report", ""]
    pop = report["population"]
    lines += [
        f"Population: m={pop['m']}, {pop['n_params']} parameters; "
        f"mean accuracy train {_fmt(pop['train_accuracy_mean'], 4)}, "
        f"strong test {_fmt(pop['strong_test_accuracy_mean'], 4)}.",
        "",
        f"Weak set: {report['weak_set']['n']} of {report['weak_set']['of']} strong-test inputs "
        f"(keep fraction {report['weak_set']['keep_fraction']}).",
        "",
        f"Disagreement across originals (strong test): {_fmt(report['disagreement_originals'], 4)}",
        "",
        "## Killability boundaries",
        "",
        "| operator | param | boundary (train) | strong test | weak test | probes | unstable | mean instances/probe |",
        "|---|---|---|---|---|---|---|---|",
    ]
    for op, row in report["operators"].items():
        sc = row["scores"] or {}
        bounds = sc.get("boundaries", {})
        lines.append(
            f"| {op} | {row['param']} | {_fmt(row['boundary_train'])} "
            f"| {_fmt(bounds.get('strong_test'))} | {_fmt(bounds.get('weak_test'))} "
            f"| {row['probes']} | {row['unstable_probes']} "
            f"| {_fmt(row['mean_instances_per_probe'], 4)} |"
        )
    lines += [
        "",
        "## Mutation scores and sensitivity",
        "",
        "| operator | MS strong (boundary) | MS weak (boundary) | sensitivity | MS strong (discrete) | MS weak (discrete) | sensitivity (discrete) |",
        "|---|---|---|---|---|---|---|",
    ]
    for op, row in report["operators"].items():
        sc = row["scores"] or {}
        msb = sc.get("ms_boundary", {})
        msd = sc.get("ms_discrete", {})
        lines.append(
            f"| {op} | {_fmt(msb.get('strong_test'))} | {_fmt(msb.get('weak_test'))} "
            f"| {_fmt(sc.get('sensitivity'))} | {_fmt(msd.get('strong_test'))} "
            f"| {_fmt(msd.get('weak_test'))} | {_fmt(sc.get('sensitivity_discrete'))} |"
        )
    lines += ["", "## Activation spectra", ""]
    any_spectra = any(row["spectra"] for row in report["operators"].values())
    if any_spectra:
        lines += [
            "| operator | within originals | within mutants | cross | separation |",
            "|---|---|---|---|---|",
        ]
        for op, row in report["operators"].items():
            spec = row["spectra"]
            if not spec or "status" in spec:
                lines.append(f"| {op} | - | - | - | - |")
                continue
            lines.append(
                f"| {op} | {_fmt(spec['within_originals_mean'])} | {_fmt(spec['within_mutants_mean'])} "
                f"| {_fmt(spec['cross_mean'])} | {_fmt(spec['separation'])} |"
            )
    else:
        lines.append("_not computed_")
    lines += [
        "",
        "Wall-clock timings live in `timings.json`, `timings.csv` and the report's",
        "`timings` block; everything else here is a pure function of the run",
        "configuration and seed.",
        "",
    ]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# predict (single-model inference on a file of inputs)
# ---------------------------------------------------------------------------


def cmd_predict(model_dir: str, inputs_path: str, out_path: str) -> dict:
    """Run one saved model over inputs given as JSON and write the outputs.

    The inputs file holds {"shape": [N, ...], "data": [flat floats]} or
    {"shape": [...], "data_file": "relative/path.bin"} with raw little-endian
    float32.  Outputs are written as {"shape": [N, out_dim], "data": [...]}.
    """
    instance = load_model(model_dir)
    try:
        meta = json.loads(Path(inputs_path).read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"inputs file is not valid JSON: {exc}") from exc
    if "shape" not in meta:
        raise ConfigError("inputs file needs a 'shape' field")
    shape = tuple(int(d) for d in meta["shape"])
    if "data" in meta:
        flat = np.asarray(meta["data"], dtype=np.float32)
    elif "data_file" in meta:
        blob = (Path(inputs_path).parent / meta["data_file"]).read_bytes()
        flat = np.frombuffer(blob, dtype="<f4")
    else:
        raise ConfigError("inputs file needs 'data' or 'data_file'")
    if flat.size != int(np.prod(shape)):
        raise ConfigError(
            f"inputs declare shape {list(shape)} ({int(np.prod(shape))} values) "
            f"but carry {flat.size} values"
        )
    outputs = forward(instance, flat.reshape(shape))
    payload = {
        "shape": list(outputs.shape),
        "data": [float(v) for v in outputs.ravel()],
    }
    write_json_atomic(out_path, payload)
    return payload


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config JSON file")
    p.add_argument("--out", required=True, help="artifacts directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=JSON",
        help="override one config value by dotted path, e.g. training.epochs=5",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mutnet",
        description="Mutation testing for trained feedforward networks",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("train", "train the original model population"),
        ("search", "bisect each operator's killability boundary on the train set"),
        ("score", "mutation scores and sensitivity for strong/weak test sets"),
        ("spectra", "activation-spectrum distances originals vs mutants"),
        ("report", "merge stage outputs into report.json / report.md"),
    ):
        _add_common(sub.add_parser(name, help=help_text))
    p = sub.add_parser("predict", help="run one saved model over a file of inputs")
    p.add_argument("--model", required=True, help="model directory (manifest.json + weights.bin)")
    p.add_argument("--inputs", required=True, help="inputs JSON ({shape, data|data_file})")
    p.add_argument("--out", required=True, help="output JSON path")
    return parser


_STAGES = {
    "train": cmd_train,
    "search": cmd_search,
    "score": cmd_score,
    "spectra": cmd_spectra,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "predict":
            cmd_predict(args.model, args.inputs, args.out)
        else:
            cfg = load_run_config(args.config, args.overrides, args.seed)
            _STAGES[args.command](cfg, Path(args.out))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except EmptyArchiveError as exc:
        print(f"empty archive: {exc}", file=sys.stderr)
        return 3
    except (OperatorError, ModelError, FormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except Exception as exc:  # pragma: no cover - last resort
        print(f"unexpected error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
