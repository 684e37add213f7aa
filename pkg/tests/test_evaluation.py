import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hierenv.errors import ContractError
from hierenv.evaluation import (
    UndefinedMetricError,
    accuracy,
    diversity_report,
    env_label_dependency,
    env_recovery_score,
    kolmogorov_q,
    ks_statistic,
    ks_two_sample,
    roc_auc,
)

samples = st.lists(st.integers(-5, 5).map(float), min_size=1, max_size=30)


def test_accuracy():
    assert accuracy([1, 0, 1, 1], [1, 1, 1, 0]) == 0.5
    assert accuracy(np.array([[0.2, 0.8], [0.9, 0.1]]), [1, 0]) == 1.0


def test_auc_hand_cases():
    assert roc_auc([0.9, 0.1], [1, 0]) == 1.0
    assert roc_auc([0.3, 0.3, 0.3], [1, 0, 1]) == 0.5
    assert roc_auc([0.8, 0.6, 0.4], [1, 0, 1]) == 0.5


def test_auc_single_class():
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [1, 1])


def _auc_oracle(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=2, max_size=25))
def test_auc_matches_pair_enumeration_and_monotone_transform(pairs):
    scores = [float(s) for s, _ in pairs]
    labels = [y for _, y in pairs]
    if all(labels) or not any(labels):
        return
    auc = roc_auc(scores, labels)
    assert auc == pytest.approx(_auc_oracle(scores, labels), abs=1e-12)
    assert roc_auc(np.exp(scores) * 3 + 1, labels) == pytest.approx(auc, abs=1e-12)


def test_ks_hand_cases():
    assert ks_two_sample([1, 2, 3], [1, 2, 3])[0] == 0.0
    assert ks_two_sample([1, 2, 3], [4, 5, 6])[0] == 1.0
    assert ks_two_sample([1, 2], [1, 3])[0] == 0.5


def test_ks_empty_sample():
    with pytest.raises(ContractError):
        ks_statistic([], [1.0])


def _ks_oracle(a, b):
    grid = sorted(set(a) | set(b))
    return max(abs(sum(x <= t for x in a) / len(a) - sum(x <= t for x in b) / len(b)) for t in grid)


@settings(max_examples=60, deadline=None)
@given(samples, samples)
def test_ks_properties(a, b):
    d, p = ks_two_sample(a, b)
    assert d == pytest.approx(_ks_oracle(a, b), abs=1e-12)
    assert (d, p) == ks_two_sample(b, a)
    assert 0.0 <= d <= 1.0 and 0.0 < p <= 1.0
    # D = 0 exactly when the empirical distributions coincide
    freq = lambda xs: {v: xs.count(v) / len(xs) for v in xs}
    same = freq(a).keys() == freq(b).keys() and all(abs(freq(a)[k] - freq(b)[k]) < 1e-12 for k in freq(a))
    assert (d == 0.0) == same


def test_kolmogorov_q_known_values():
    # Q(1) = 2(e^-2 - e^-8 + e^-18 - ...)
    oracle = 2 * sum((-1) ** (j - 1) * math.exp(-2 * j * j) for j in range(1, 50))
    assert kolmogorov_q(1.0) == pytest.approx(oracle, abs=1e-12)
    assert kolmogorov_q(0.0) == 1.0
    assert 0.0 < kolmogorov_q(40.0) < 1e-300


def test_diversity_family_split_is_one():
    env_feature = np.repeat(np.arange(8), 25)
    families = env_feature // 4
    report = diversity_report(env_feature, families, "family")
    assert report.inter_env_distance == 1.0
    assert np.array_equal(report.D, report.D.T)


def test_diversity_random_split_is_small():
    rng = np.random.default_rng(0)
    feature = rng.integers(0, 8, 1000)
    report = diversity_report(feature, rng.integers(0, 2, 1000), "rand")
    assert report.inter_env_distance < 0.1


def test_diversity_shared_sample_breaks_full_separation():
    feature = np.array([0, 0, 1, 5, 5, 1])
    envs = np.array([0, 0, 0, 1, 1, 1])
    assert diversity_report(feature, envs).inter_env_distance < 1.0


def test_diversity_degenerate(caplog):
    report = diversity_report([1.0, 2.0, 3.0], [0, 0, 1])
    assert report.inter_env_distance == 0.0
    assert "skipped" in caplog.text


def test_recovery_score():
    truth = np.array([0, 0, 1, 1, 2])
    assert env_recovery_score(truth, truth) == 1.0
    assert env_recovery_score((truth + 1) % 3, truth) == 1.0
    assert env_recovery_score(np.zeros(5, dtype=int), truth) == 0.4


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=20), st.data())
def test_recovery_relabel_invariant(a, data):
    t = data.draw(st.lists(st.integers(0, 2), min_size=len(a), max_size=len(a)))
    a, t = np.array(a), np.array(t)
    perm = np.random.default_rng(len(a)).permutation(4)
    assert env_recovery_score(perm[a], t) == env_recovery_score(a, t)
    # brute force oracle over all injective maps of the assignment labels
    labels = sorted(set(a.tolist()))
    targets = list(range(max(4, len(labels))))
    best = max(
        np.mean([m[labels.index(x)] == y for x, y in zip(a, t)])
        for m in itertools.permutations(targets, len(labels))
    )
    assert env_recovery_score(a, t) == pytest.approx(best)


def test_recovery_random_near_half():
    rng = np.random.default_rng(0)
    score = env_recovery_score(rng.integers(0, 2, 4000), np.repeat([0, 1], 2000))
    assert 0.5 <= score < 0.5 + 3 / math.sqrt(4000)


def test_dependency_cases():
    assert env_label_dependency([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(0.0, abs=1e-15)
    assert env_label_dependency([0, 0, 1, 1], [0, 0, 1, 1]) == pytest.approx(math.log(2))
    # counts e0: (3, 1), e1: (1, 3)
    env = [0, 0, 0, 0, 1, 1, 1, 1]
    y = [0, 0, 0, 1, 0, 1, 1, 1]
    h = lambda ps: -sum(p * math.log(p) for p in ps if p)
    oracle = h([0.5, 0.5]) - h([0.75, 0.25])
    assert env_label_dependency(env, y) == pytest.approx(oracle, abs=1e-14)
