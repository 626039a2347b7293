"""Mutation testing for trained feedforward neural networks.

Train a population of originals, perturb them with inhibitor-style
mutation operators, find each operator's statistical killability boundary
by binary search, and score test sets by what they can still kill.
"""

from .model import (
    Dataset,
    LayerSpec,
    ModelError,
    ModelGraph,
    ModelInstance,
    accuracy,
    activation,
    conv2d,
    dense,
    flatten,
    forward,
    forward_activations,
    maxpool2d,
    predict_correctness,
)
from .io import (
    FormatError,
    load_dataset,
    load_idx,
    load_model,
    save_dataset,
    save_model,
)
from .datasets import make_synthetic_classification, make_synthetic_regression
from .train import (
    DivergenceError,
    OriginalPopulation,
    TrainingConfig,
    dataset_loss,
    init_instance,
    train_instance,
    train_population,
)
from .operators import (
    NeuronAddress,
    OperatorConfig,
    OperatorError,
    apply,
    neuron_pool,
    outgoing_neuron_pool,
    selection_count,
    weight_pool_size,
)
from .stats import (
    EvaluationSample,
    KillResult,
    KillThresholds,
    KillabilityRecord,
    StabilityReport,
    build_weak_set,
    cohens_d,
    config_score_boundary,
    config_score_discrete,
    disagreement_rate,
    evaluate_population,
    is_killed,
    mann_whitney_p,
    mutation_score_class_level,
    rse,
    sensitivity,
)
from .search import (
    MutantArchiveEntry,
    SearchConfig,
    SearchResult,
    SearchTrace,
    binary_search,
    bisect,
    generate_batch,
    reevaluate_archive,
)
from .spectral import (
    DistanceMatrix,
    GroupComparison,
    SpectrumProfile,
    compare_groups,
    default_spectrum_layer,
    default_value_range,
    distance_matrix,
    extract_spectrum,
    sample_inputs,
    spectral_distance,
)
from .rng import derive_seed

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "DistanceMatrix",
    "DivergenceError",
    "EvaluationSample",
    "FormatError",
    "GroupComparison",
    "KillResult",
    "KillThresholds",
    "KillabilityRecord",
    "LayerSpec",
    "ModelError",
    "ModelGraph",
    "ModelInstance",
    "MutantArchiveEntry",
    "NeuronAddress",
    "OperatorConfig",
    "OperatorError",
    "OriginalPopulation",
    "SearchConfig",
    "SearchResult",
    "SearchTrace",
    "SpectrumProfile",
    "StabilityReport",
    "TrainingConfig",
    "accuracy",
    "activation",
    "apply",
    "binary_search",
    "bisect",
    "build_weak_set",
    "cohens_d",
    "compare_groups",
    "config_score_boundary",
    "config_score_discrete",
    "conv2d",
    "dataset_loss",
    "default_spectrum_layer",
    "default_value_range",
    "dense",
    "derive_seed",
    "disagreement_rate",
    "distance_matrix",
    "evaluate_population",
    "extract_spectrum",
    "flatten",
    "forward",
    "forward_activations",
    "generate_batch",
    "init_instance",
    "is_killed",
    "load_dataset",
    "load_idx",
    "load_model",
    "make_synthetic_classification",
    "make_synthetic_regression",
    "mann_whitney_p",
    "maxpool2d",
    "mutation_score_class_level",
    "neuron_pool",
    "outgoing_neuron_pool",
    "predict_correctness",
    "reevaluate_archive",
    "rse",
    "sample_inputs",
    "save_dataset",
    "save_model",
    "selection_count",
    "sensitivity",
    "spectral_distance",
    "train_instance",
    "train_population",
    "weight_pool_size",
]
