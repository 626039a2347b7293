"""Metric machinery: RSE, kill decision, scores, sensitivity, weak sets.

The numeric oracles here were hand-derived (or brute-forced in-test by an
independent second route) before the implementations existed; don't update
them to match code changes without re-deriving.
"""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mutnet.model import Dataset, ModelInstance
from mutnet.stats import (
    EvaluationSample,
    KillabilityRecord,
    KillThresholds,
    build_weak_set,
    cohens_d,
    config_score_boundary,
    config_score_discrete,
    difficulty_scores,
    disagreement_rate,
    evaluate_population,
    is_killed,
    mann_whitney_p,
    mutation_score_class_level,
    rse,
    sensitivity,
)
from mutnet.train import OriginalPopulation

from support import identity_classifier, mlp_graph, random_instance

# ---------------------------------------------------------------------------
# EvaluationSample
# ---------------------------------------------------------------------------


def test_sample_invariants():
    s = EvaluationSample(np.array([0.5, 0.75, 0.5, 1.0]), n=2, m=2)
    assert s.n == 2 and s.m == 2 and s.values.size == 4
    with pytest.raises(ValueError, match="lie in"):
        EvaluationSample(np.array([0.5, 1.5]))
    with pytest.raises(ValueError, match="shape mismatch"):
        EvaluationSample(np.array([0.5, 0.5, 0.5]), n=2, m=2)
    with pytest.raises(ValueError):
        EvaluationSample(np.array([0.5]))


def test_evaluate_population_layout():
    insts = [identity_classifier(2) for _ in range(3)]
    data = Dataset(
        np.array([[0.9, 0.1], [0.1, 0.9]], np.float32), np.array([0, 1]), split="strong_test"
    )
    sample = evaluate_population(insts, data)
    assert sample.values.tolist() == [1.0, 1.0, 1.0]
    assert (sample.n, sample.m) == (1, 3)
    assert sample.dataset == "strong_test"


# ---------------------------------------------------------------------------
# RSE
# ---------------------------------------------------------------------------


def test_rse_constant_sample_is_stable():
    report = rse(EvaluationSample(np.full(6, 0.9), n=2, m=3))
    assert report.se == 0.0 and report.rse == 0.0
    assert report.stable
    assert report.mean == 0.9


def test_rse_hand_case():
    # [0.8, 1.0, 0.8, 1.0]: mu=0.9, sigma=0.11547, SE=0.05774, RSE=0.06415
    report = rse(EvaluationSample(np.array([0.8, 1.0, 0.8, 1.0]), n=2, m=2))
    assert abs(report.mean - 0.9) < 1e-12
    assert abs(report.std - 0.11547) < 1e-5
    assert abs(report.se - 0.05774) < 1e-5
    assert abs(report.rse - 0.06415) < 1e-5
    assert not report.stable  # 0.06415 >= 0.05
    assert report.n_instances == 4


def test_rse_trace_follows_batches():
    report = rse(EvaluationSample(np.array([0.8, 1.0, 0.8, 1.0]), n=2, m=2))
    assert len(report.trace) == 2
    # after batch 1: values [0.8, 1.0] -> RSE = (0.14142/sqrt(2)) / 0.9
    assert abs(report.trace[0] - 0.1 / 0.9) < 1e-12
    assert report.trace[1] == report.rse


def test_rse_zero_mean_is_unstable():
    report = rse(EvaluationSample(np.zeros(4), n=1, m=4))
    assert not report.stable
    assert report.reason == "zero-mean metric"
    assert math.isinf(report.rse)


def test_rse_scale_invariance():
    base = np.array([0.31, 0.5, 0.42, 0.66, 0.58])
    r1 = rse(base)  # raw-array route: unbounded values allowed
    for c in (0.1, 3.0, 250.0):
        r2 = rse(base * c)
        assert abs(r1.rse - r2.rse) < 1e-12


def test_rse_threshold_boundary_is_strict():
    values = np.array([0.8, 1.0, 0.8, 1.0])
    report = rse(EvaluationSample(values, n=2, m=2), threshold=0.06415002990995841)
    assert not report.stable  # stable iff rse < threshold, not <=
    report2 = rse(EvaluationSample(values, n=2, m=2), threshold=0.0642)
    assert report2.stable


def test_rse_monte_carlo_magnitude():
    # N(0.9, 0.045^2), n*m = 100: RSE concentrates near 0.045/0.9/10 = 0.005
    rng = np.random.default_rng(0)
    vals = rng.normal(0.9, 0.045, size=100)
    report = rse(vals)
    assert 0.002 < report.rse < 0.008
    assert report.stable


def test_rse_shrinks_with_sample_size():
    # median RSE over 200 trials at 4k samples < median at k samples
    rng = np.random.default_rng(7)
    k = 25
    small = [rse(rng.normal(0.9, 0.05, size=k)).rse for _ in range(200)]
    large = [rse(rng.normal(0.9, 0.05, size=4 * k)).rse for _ in range(200)]
    assert np.median(large) < np.median(small)


# ---------------------------------------------------------------------------
# kill decision
# ---------------------------------------------------------------------------


def test_cohens_d_bessel_oracle():
    orig = np.array([0.90] * 10 + [0.92] * 10)
    mut = np.array([0.50] * 10 + [0.52] * 10)
    # pooled Bessel std: s^2 = 0.002/19 on both sides -> d = 0.4/s
    expected = 0.4 / math.sqrt(0.002 / 19)
    d = cohens_d(mut, orig)
    assert abs(d - expected) < 1e-12
    assert abs(d - 38.987177379235853) < 1e-9


def test_kill_on_cleanly_separated_samples():
    orig = EvaluationSample(np.array([0.90] * 10 + [0.92] * 10), n=1, m=20)
    mut = EvaluationSample(np.array([0.50] * 10 + [0.52] * 10), n=1, m=20)
    result = is_killed(mut, orig)
    assert result.killed
    assert result.effect_size >= 0.5
    assert result.p_value < 0.001


def test_identical_samples_not_killed():
    vals = np.array([0.8, 0.9, 1.0, 0.85])
    result = is_killed(vals, vals.copy())
    assert not result.killed
    assert result.effect_size == 0.0


def test_degenerate_constant_samples():
    same = is_killed(np.full(4, 0.5), np.full(4, 0.5))
    assert (same.killed, same.effect_size, same.p_value) == (False, 0.0, 1.0)
    diff = is_killed(np.full(4, 0.5), np.full(4, 0.6))
    assert diff.killed
    assert math.isinf(diff.effect_size)
    assert diff.p_value == 0.0


def test_kill_requires_both_conditions():
    rng = np.random.default_rng(1)
    orig = rng.normal(0.9, 0.01, size=20)
    # large effect but tiny samples -> exact p too big at alpha=0.05
    tiny_mut = np.array([0.5, 0.51])
    tiny_orig = np.array([0.9, 0.91])
    r = is_killed(tiny_mut, tiny_orig, KillThresholds(alpha=0.05, beta=0.5))
    assert r.effect_size >= 0.5
    assert r.p_value >= 0.05  # C(4,2)=6 -> two-sided exact floor is 1/3
    assert not r.killed
    # significant difference but beta gate set impossibly high
    mut = rng.normal(0.5, 0.01, size=20)
    r2 = is_killed(mut, orig, KillThresholds(alpha=0.05, beta=1e6))
    assert r2.p_value < 0.05
    assert not r2.killed


def test_exact_mann_whitney_enumeration():
    # classic disjoint ranks: two-sided exact p = 2 / C(6,3) = 0.1
    assert abs(mann_whitney_p(np.array([1.0, 2, 3]), np.array([4.0, 5, 6])) - 0.1) < 1e-12
    # and symmetric in its arguments
    assert abs(mann_whitney_p(np.array([4.0, 5, 6]), np.array([1.0, 2, 3])) - 0.1) < 1e-12
    # n=2: 2 / C(4,2) = 1/3
    assert abs(mann_whitney_p(np.array([1.0, 2]), np.array([3.0, 4])) - 1 / 3) < 1e-12


def _brute_force_two_sided_p(x, y):
    """Permutation distribution of U by direct enumeration."""
    combined = np.concatenate([x, y])
    n1 = len(x)

    def u_stat(xs, ys):
        u = 0.0
        for a in xs:
            for b in ys:
                if a > b:
                    u += 1.0
                elif a == b:
                    u += 0.5
        return u

    observed = u_stat(x, y)
    mu = len(x) * len(y) / 2.0
    dev = abs(observed - mu)
    hits = 0
    total = 0
    idx = range(len(combined))
    for picks in itertools.combinations(idx, n1):
        xs = combined[list(picks)]
        ys = combined[[i for i in idx if i not in picks]]
        if abs(u_stat(xs, ys) - mu) >= dev - 1e-12:
            hits += 1
        total += 1
    return hits / total


@pytest.mark.parametrize(
    "x, y",
    [
        ([1.0, 1.0, 2.0], [1.0, 2.0, 2.0]),
        ([0.8, 0.9, 0.9, 1.0], [0.7, 0.8, 0.9]),
        ([0.5, 0.5], [0.5, 0.6, 0.7]),
        ([3.0, 1.0, 4.0], [1.0, 5.0, 9.0, 2.0]),
    ],
)
def test_exact_p_matches_brute_force_with_ties(x, y):
    x = np.array(x)
    y = np.array(y)
    assert abs(mann_whitney_p(x, y) - _brute_force_two_sided_p(x, y)) < 1e-12


def test_kill_shift_invariance():
    rng = np.random.default_rng(3)
    x = rng.normal(0.5, 0.05, size=12)
    y = rng.normal(0.6, 0.05, size=12)
    base = is_killed(x, y)
    shifted = is_killed(x + 0.17, y + 0.17)
    assert base.killed == shifted.killed
    assert abs(base.effect_size - shifted.effect_size) < 1e-9
    assert abs(base.p_value - shifted.p_value) < 1e-9


def test_effect_size_is_magnitude_symmetric():
    x = np.array([0.4, 0.45, 0.5])
    y = np.array([0.8, 0.85, 0.9])
    assert abs(cohens_d(x, y) - cohens_d(y, x)) < 1e-12
    assert cohens_d(x, y) > 0


def test_same_distribution_rarely_killed():
    # quick calibration smoke check (the acceptance suite runs 1000 trials)
    rng = np.random.default_rng(11)
    kills = 0
    for _ in range(200):
        a = rng.normal(0.9, 0.02, size=20)
        b = rng.normal(0.9, 0.02, size=20)
        if is_killed(a, b, KillThresholds(alpha=0.05, beta=0.0)).killed:
            kills += 1
    assert kills <= 24  # ~5% expected; generous ceiling for 200 trials


def test_thresholds_validation():
    with pytest.raises(ValueError):
        KillThresholds(alpha=0.0)
    with pytest.raises(ValueError):
        KillThresholds(alpha=1.0)
    with pytest.raises(ValueError):
        KillThresholds(beta=-0.5)


# ---------------------------------------------------------------------------
# disagreement
# ---------------------------------------------------------------------------


def test_disagreement_all_correct_is_zero():
    assert disagreement_rate(np.ones((20, 50), dtype=bool)) == 0.0


def test_disagreement_exact_count():
    c = np.ones((20, 100), dtype=bool)
    c[0, :32] = False  # 32 mixed columns
    c[:, 95:] = False  # 5 all-wrong columns (the 32 stay mixed)
    assert disagreement_rate(c) == 0.32


def test_disagreement_ignores_uniformly_wrong_inputs():
    c = np.zeros((5, 10), dtype=bool)  # everyone wrong everywhere
    assert disagreement_rate(c) == 0.0


def test_disagreement_permutation_invariance():
    rng = np.random.default_rng(5)
    c = rng.random((8, 40)) < 0.7
    base = disagreement_rate(c)
    assert disagreement_rate(c[rng.permutation(8)]) == base
    assert disagreement_rate(c[:, rng.permutation(40)]) == base


def test_disagreement_rejects_empty():
    with pytest.raises(ValueError):
        disagreement_rate(np.ones((0, 5), dtype=bool))
    with pytest.raises(ValueError):
        disagreement_rate(np.ones((5, 0), dtype=bool))


# ---------------------------------------------------------------------------
# class-level mutation score
# ---------------------------------------------------------------------------


def _identity_population(n_classes):
    ref = identity_classifier(n_classes)
    # a second instance so the population container is satisfied
    return OriginalPopulation(ref.graph, (ref, ref), (0, 1))


def _flip_mutant(n_classes, flipped):
    kernel = np.eye(n_classes, dtype=np.float32)
    for c in flipped:
        kernel[c, c] = -1.0
    ref = identity_classifier(n_classes)
    return ModelInstance(ref.graph, (kernel,), provenance="mutant")


def _onehot_data(n_classes):
    return Dataset(
        np.eye(n_classes, dtype=np.float32) * 0.9,
        np.arange(n_classes),
        task="classification",
    )


def test_class_score_identical_mutant_is_zero():
    pop = _identity_population(4)
    data = _onehot_data(4)
    assert mutation_score_class_level(pop, [pop.instances[0]], data) == 0.0


def test_class_score_counts_flipped_classes():
    pop = _identity_population(10)
    data = _onehot_data(10)
    mutant = _flip_mutant(10, {2, 5, 7})
    assert mutation_score_class_level(pop, [mutant], data) == 0.3
    half = _flip_mutant(2, {0})
    pop2 = _identity_population(2)
    assert mutation_score_class_level(pop2, [half], _onehot_data(2)) == 0.5


def test_class_score_averages_over_mutants():
    pop = _identity_population(4)
    data = _onehot_data(4)
    mutants = [_flip_mutant(4, {0}), _flip_mutant(4, {1, 2})]
    assert mutation_score_class_level(pop, mutants, data) == (0.25 + 0.5) / 2


def test_class_score_matches_brute_force_on_random_models():
    from mutnet.model import predict_correctness

    graph = mlp_graph([3, 6, 4])
    rng = np.random.default_rng(9)
    data = Dataset(
        rng.normal(size=(40, 3)).astype(np.float32),
        rng.integers(0, 4, size=40),
        task="classification",
    )
    originals = OriginalPopulation(
        graph, (random_instance(graph, 0), random_instance(graph, 1)), (0, 1)
    )
    mutants = [random_instance(graph, s) for s in (10, 11, 12)]
    got = mutation_score_class_level(originals, mutants, data)

    ref_ok = predict_correctness(originals.instances[0], data)
    classes = sorted(set(data.labels.tolist()))
    total = 0.0
    for mut in mutants:
        mut_ok = predict_correctness(mut, data)
        killed = 0
        for c in classes:
            for i in range(data.n):
                if data.labels[i] == c and ref_ok[i] and not mut_ok[i]:
                    killed += 1
                    break
        total += killed / len(classes)
    assert abs(got - total / len(mutants)) < 1e-12


def test_class_score_rejects_regression():
    pop = _identity_population(2)
    data = Dataset(
        np.zeros((2, 2), np.float32), np.zeros((2, 1), np.float32), task="regression"
    )
    with pytest.raises(ValueError):
        mutation_score_class_level(pop, [pop.instances[0]], data)


# ---------------------------------------------------------------------------
# configuration-level scores
# ---------------------------------------------------------------------------


def test_discrete_score_cases():
    assert config_score_discrete([0.5, 0.7, 0.9], [0.7, 0.9]) == 2 / 3
    assert config_score_discrete([0.5], [0.5]) == 1.0
    assert config_score_discrete([0.5, 0.7], []) == 0.0
    assert config_score_discrete([], [0.3]) is None  # undefined, not zero
    # configs outside the train-killed set are excluded from the ratio
    assert config_score_discrete([0.5, 0.7], [0.3, 0.5, 0.7]) == 1.0


def test_boundary_score_worked_example():
    # train boundary 0.3, test boundary 0.5 on [0, 1] -> 0.5/0.7
    score = config_score_boundary(0.3, 0.5, upper=1.0)
    assert abs(score - 0.7142857142857143) < 1e-9
    assert abs(score - 0.714286) < 1e-6


def test_boundary_score_edges():
    assert config_score_boundary(0.3, 0.3, upper=1.0) == 1.0
    assert config_score_boundary(0.5, 0.2, upper=1.0) == 1.0  # clamped
    assert config_score_boundary(0.3, 1.0, upper=1.0) == 0.0
    assert config_score_boundary(None, 0.5, upper=1.0) is None
    assert config_score_boundary(0.3, None, upper=1.0) == 0.0  # test killed nothing
    assert config_score_boundary(1.0, 1.0, upper=1.0) is None  # train boundary at ub


def test_killability_record_guards_boundary_mode():
    rec = KillabilityRecord(
        operator="WI",
        param="inhibition",
        lower=0.0,
        upper=1.0,
        boundary_train=0.3,
        archive_size=3,
        monotone=False,
        boundaries={"strong_test": 0.5},
    )
    with pytest.raises(ValueError, match="monotone"):
        rec.boundary_score("strong_test")
    ok = KillabilityRecord(
        operator="WI",
        param="inhibition",
        lower=0.0,
        upper=1.0,
        boundary_train=0.3,
        archive_size=3,
        boundaries={"strong_test": 0.5},
        killed_configs={"train": (0.5, 0.7), "strong_test": (0.7,)},
    )
    assert abs(ok.boundary_score("strong_test") - 0.5 / 0.7) < 1e-12
    assert ok.discrete_score("strong_test") == 0.5


# ---------------------------------------------------------------------------
# sensitivity
# ---------------------------------------------------------------------------


def test_sensitivity_arithmetic():
    assert sensitivity(0.8, 0.2) == (0.75, None)
    assert sensitivity(0.6, 0.6) == (0.0, None)
    value, reason = sensitivity(0.2, 0.4)
    assert value == -1.0 and reason is None  # weak can out-kill strong


def test_sensitivity_edges():
    assert sensitivity(None, 0.5) == (None, "U/NK")
    assert sensitivity(0.0, 0.5) == (None, "undefined-div0")
    assert sensitivity(0.8, None) == (1.0, None)  # weak killed nothing: perfect


# ---------------------------------------------------------------------------
# weak-set construction
# ---------------------------------------------------------------------------


def test_weak_set_tie_break_keeps_first_indices():
    # every input identical -> all difficulties tie -> first ceil(qN) kept
    pop = _identity_population(2)
    x = np.tile(np.array([[0.9, 0.1]], np.float32), (8, 1))
    data = Dataset(x, np.zeros(8, dtype=np.int64), split="strong_test")
    weak = build_weak_set(data, pop, keep_fraction=0.75)
    assert weak.n == 6  # ceil(0.75 * 8)
    assert np.array_equal(weak.inputs, data.inputs[:6])
    assert weak.split == "weak_test"


def test_weak_set_drops_the_hardest_input():
    pop = _identity_population(2)
    # softmax margin grows with the gap; input 2 is the hardest (gap 0.1)
    x = np.array([[0.9, 0.0], [0.7, 0.0], [0.1, 0.0], [0.5, 0.0]], np.float32)
    data = Dataset(x, np.zeros(4, dtype=np.int64), split="strong_test")
    weak = build_weak_set(data, pop, keep_fraction=(4 - 1) / 4)
    assert weak.n == 3
    kept = {tuple(row) for row in weak.inputs.tolist()}
    assert (0.10000000149011612, 0.0) not in kept  # hardest dropped
    difficulty = difficulty_scores(pop, data)
    assert np.argmin(difficulty) == 2


def test_weak_set_is_easier_than_strong(tiny_population, blobs4):
    _, strong = blobs4
    weak = build_weak_set(strong, tiny_population, keep_fraction=0.75)
    strong_acc = tiny_population.accuracies(strong).mean()
    weak_acc = tiny_population.accuracies(weak).mean()
    assert weak.n == math.ceil(0.75 * strong.n)
    assert weak_acc >= strong_acc


def test_weak_set_hard_direction_flag(tiny_population, blobs4):
    _, strong = blobs4
    easy = build_weak_set(strong, tiny_population, keep_fraction=0.5, easiest=True)
    hard = build_weak_set(strong, tiny_population, keep_fraction=0.5, easiest=False)
    assert tiny_population.accuracies(easy).mean() >= tiny_population.accuracies(hard).mean()


def test_weak_set_preconditions():
    pop = _identity_population(2)
    data = Dataset(np.eye(2, dtype=np.float32), np.arange(2), split="strong_test")
    for bad_q in (0.0, 1.0, -0.2, 1.7):
        with pytest.raises(ValueError):
            build_weak_set(data, pop, keep_fraction=bad_q)
    with pytest.raises(ValueError, match="keep"):
        build_weak_set(data, pop, keep_fraction=0.2)  # 0.4 of an input: too few


@given(st.integers(5, 40), st.floats(0.2, 0.95))
@settings(max_examples=30, deadline=None)
def test_weak_set_size_formula(n, q):
    if q * n < 1:
        return
    pop = _identity_population(2)
    rng = np.random.default_rng(n)
    data = Dataset(
        rng.normal(size=(n, 2)).astype(np.float32),
        rng.integers(0, 2, size=n),
        split="strong_test",
    )
    weak = build_weak_set(data, pop, keep_fraction=q)
    assert weak.n == math.ceil(q * n)
