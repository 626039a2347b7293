"""Synthetic data recipes: shapes, determinism, and learnability."""

import numpy as np
import pytest

from mutnet.datasets import make_synthetic_classification, make_synthetic_regression
from mutnet.model import ModelGraph, accuracy, dense, predict_correctness
from mutnet.train import TrainingConfig, train_instance


def test_split_arithmetic_ten_classes():
    train, test = make_synthetic_classification(n_classes=10, n_per_class=200, seed=0)
    assert train.n == 1600 and test.n == 400
    assert train.n + test.n == 2000
    for c in range(10):
        assert int((train.labels == c).sum()) == 160
        assert int((test.labels == c).sum()) == 40
    assert train.split == "train" and test.split == "strong_test"


def test_classification_determinism():
    a_train, a_test = make_synthetic_classification(4, 50, spread=0.2, seed=9)
    b_train, b_test = make_synthetic_classification(4, 50, spread=0.2, seed=9)
    assert a_train.inputs.tobytes() == b_train.inputs.tobytes()
    assert a_test.inputs.tobytes() == b_test.inputs.tobytes()
    assert np.array_equal(a_train.labels, b_train.labels)
    c_train, _ = make_synthetic_classification(4, 50, spread=0.2, seed=10)
    assert a_train.inputs.tobytes() != c_train.inputs.tobytes()


def test_blob_centers_on_unit_circle():
    train, _ = make_synthetic_classification(n_classes=8, n_per_class=100, spread=0.01, seed=1)
    for c in range(8):
        pts = train.inputs[train.labels == c]
        center = pts.mean(axis=0)
        # tight blobs sit on the unit circle at equally spaced angles
        assert abs(np.linalg.norm(center) - 1.0) < 0.05


def test_tight_blobs_are_linearly_separable():
    train, test = make_synthetic_classification(n_classes=2, n_per_class=100, spread=0.01, seed=3)
    graph = ModelGraph(
        (dense(2, 2, activation="softmax"),), input_shape=(2,), task="classification"
    )
    cfg = TrainingConfig(epochs=40, batch_size=16, learning_rate=0.5)
    inst, _ = train_instance(graph, train, cfg, seed=0)
    assert accuracy(inst, test) >= 0.99


def test_classification_preconditions():
    with pytest.raises(ValueError):
        make_synthetic_classification(n_classes=1, n_per_class=10)
    with pytest.raises(ValueError):
        make_synthetic_classification(n_classes=2, n_per_class=10, spread=0.0)


def test_regression_split_and_determinism():
    train, test = make_synthetic_regression(n=1000, noise=0.05, seed=4)
    assert train.n == 800 and test.n == 200
    assert train.task == "regression" and train.labels.shape == (800, 1)
    again, _ = make_synthetic_regression(n=1000, noise=0.05, seed=4)
    assert train.inputs.tobytes() == again.inputs.tobytes()
    assert train.labels.tobytes() == again.labels.tobytes()


def test_noise_free_regression_is_learnable_to_tau():
    # an oversized MLP pushed to convergence nails every test point at 0.1
    train, test = make_synthetic_regression(n=200, noise=0.0, seed=5)
    graph = ModelGraph(
        (
            dense(2, 64, activation="tanh"),
            dense(64, 64, activation="tanh"),
            dense(64, 1, activation="linear"),
        ),
        input_shape=(2,),
        task="regression",
    )
    cfg = TrainingConfig(
        epochs=2000, batch_size=16, learning_rate=0.05, optimizer="sgd_momentum", loss="mse"
    )
    inst, _ = train_instance(graph, train, cfg, seed=1)
    assert predict_correctness(inst, test, tau=0.1).mean() == 1.0
    assert predict_correctness(inst, train, tau=0.1).mean() >= 0.98
