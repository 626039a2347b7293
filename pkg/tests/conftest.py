"""Session fixtures: one tiny trained population shared by the heavier tests."""

from __future__ import annotations

import numpy as np
import pytest

from mutnet.datasets import make_synthetic_classification
from mutnet.train import TrainingConfig, train_population

from support import mlp_graph


@pytest.fixture(scope="session")
def blobs4():
    """Small 4-class blob problem: (train, strong_test)."""
    return make_synthetic_classification(n_classes=4, n_per_class=40, spread=0.08, seed=7)


@pytest.fixture(scope="session")
def tiny_population(blobs4):
    """Four trained 2-16-4 originals; accurate enough to give mutants room."""
    train, _ = blobs4
    graph = mlp_graph([2, 16, 4])
    cfg = TrainingConfig(epochs=25, batch_size=16, learning_rate=0.1, optimizer="sgd_momentum")
    pop = train_population(graph, train, cfg, m=4, base_seed=11)
    accs = pop.accuracies(train)
    # the fixture is useless if training failed; fail loudly here, not downstream
    assert np.all(accs > 0.8), f"fixture population under-trained: {accs}"
    return pop
