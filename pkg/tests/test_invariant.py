import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hierenv.data import generate_split, graph_from_record
from hierenv.errors import ContractError
from hierenv.invariant import (
    InvariantClassifier,
    Stage2Config,
    invariant_loss,
    irm_penalty,
    per_sample_ce,
    predict,
    risk_report,
    train_stage2,
)
from hierenv.rng import RngStreams


def _risk(w, logits, labels):
    """Numpy oracle: mean cross-entropy of w * logits."""
    z = w * np.asarray(logits, dtype=np.float64)
    if z.ndim == 1 or z.shape[1] == 1:
        z = z.reshape(-1)
        return float(np.mean(np.logaddexp(0.0, z) - labels * z))
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-np.mean(logp[np.arange(len(labels)), labels]))


def _penalty_oracle(logits, labels, envs, h=1e-6):
    total = 0.0
    for e in np.unique(envs):
        idx = envs == e
        g = (_risk(1 + h, logits[idx], labels[idx]) - _risk(1 - h, logits[idx], labels[idx])) / (2 * h)
        total += g * g
    return total


def test_irm_single_logit_closed_form():
    sig = 1.0 / (1.0 + math.exp(-1.0))
    oracle = (sig - 1.0) ** 2
    value = irm_penalty(np.array([[1.0]]), np.array([1]), np.array([0])).item()
    assert value == pytest.approx(oracle, rel=1e-14)
    assert value == pytest.approx(0.07233, abs=1e-5)


def test_irm_zero_logit():
    assert irm_penalty(np.array([[0.0]]), np.array([1]), np.array([0])).item() == 0.0
    assert irm_penalty(np.zeros((4, 3)), np.array([0, 1, 2, 0]), np.array([0, 0, 1, 1])).item() == 0.0


def test_irm_additive_over_duplicated_environments():
    logits = np.array([[0.4, -1.0], [2.0, 0.5]])
    labels = np.array([1, 0])
    single = irm_penalty(logits, labels, np.array([0, 0])).item()
    doubled = irm_penalty(np.vstack([logits, logits]), np.tile(labels, 2), np.array([0, 0, 1, 1])).item()
    assert doubled == pytest.approx(2 * single, rel=1e-14)


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, (6, 2), elements=st.floats(-4, 4)),
    st.lists(st.integers(0, 1), min_size=6, max_size=6),
    st.lists(st.integers(0, 2), min_size=6, max_size=6),
)
def test_irm_matches_finite_difference_oracle(logits, labels, envs):
    labels, envs = np.array(labels), np.array(envs)
    oracle = _penalty_oracle(logits, labels, envs)
    value = irm_penalty(logits, labels, envs).item()
    assert abs(value - oracle) <= 1e-6 * max(1.0, abs(oracle))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (5, 1), elements=st.floats(-4, 4)), st.lists(st.integers(0, 1), min_size=5, max_size=5))
def test_irm_binary_matches_oracle_and_relabeling(logits, labels):
    labels = np.array(labels)
    envs = np.array([0, 0, 1, 2, 2])
    value = irm_penalty(logits, labels, envs).item()
    assert abs(value - _penalty_oracle(logits, labels, envs)) <= 1e-6 * max(1.0, value)
    assert irm_penalty(logits, labels, (envs + 1) % 3).item() == pytest.approx(value, rel=1e-12, abs=1e-300)


def test_missing_environment_warns(caplog):
    irm_penalty(np.zeros((2, 2)), np.array([0, 1]), np.array([0, 0]), num_envs=3)
    assert "no samples" in caplog.text


def test_invariant_loss_hand_batch():
    logits = np.array([[1.0], [-0.5]])
    labels = np.array([1, 0])
    envs = np.array([0, 1])
    ce = np.mean([math.log1p(math.exp(-1.0)), math.log1p(math.exp(-0.5))])
    sig = lambda v: 1 / (1 + math.exp(-v))
    pen = ((sig(1.0) - 1) * 1.0) ** 2 + ((sig(-0.5) - 0) * -0.5) ** 2
    assert invariant_loss(logits, labels, envs, 1.0).item() == pytest.approx(ce + pen, rel=1e-14)
    assert invariant_loss(logits, labels, envs, 0.0).item() == pytest.approx(ce, rel=1e-14)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 2), elements=st.floats(-3, 3)), st.floats(0, 5), st.floats(0, 5))
def test_invariant_loss_monotone_in_lambda(logits, l1, l2):
    labels, envs = np.array([0, 1, 1, 0]), np.array([0, 0, 1, 1])
    lo, hi = sorted([l1, l2])
    assert invariant_loss(logits, labels, envs, lo).item() <= invariant_loss(logits, labels, envs, hi).item() + 1e-12


def test_negative_lambda_rejected():
    with pytest.raises(ContractError):
        invariant_loss(np.zeros((1, 2)), np.array([0]), np.array([0]), -0.1)


def test_per_sample_ce_matches_oracle():
    logits = np.array([[2.0, -1.0, 0.5], [0.0, 0.0, 0.0]])
    labels = np.array([2, 1])
    assert np.mean(per_sample_ce(logits, labels).data) == pytest.approx(_risk(1.0, logits, labels), rel=1e-14)


def test_risk_report_counts():
    rep = risk_report(np.zeros((5, 2)), np.array([0, 1, 0, 1, 1]), np.array([0, 0, 1, 1, 1]))
    assert rep.counts == {0: 2, 1: 3}
    assert all(r >= 0 for r in rep.risks.values())


def test_stage2_smoke_and_erm_equivalence():
    graphs = generate_split("train", 8, 0.9, 0.05, 1)
    cfg = Stage2Config(hidden=8, num_layers=1, epochs=2, batch_size=4, lam=0.0)
    envs = np.arange(8) % 2
    a, hist = train_stage2(graphs, envs, graphs[:4], 2, cfg, RngStreams(3))
    b, _ = train_stage2(graphs, np.zeros(8, dtype=int), graphs[:4], 2, cfg, RngStreams(3))
    assert np.isfinite(hist.train_loss).all()
    for name in a.params:
        assert np.array_equal(a.params[name].data, b.params[name].data)


def test_predict_properties():
    graphs = generate_split("train", 5, 0.9, 0.05, 4)
    clf = InvariantClassifier(11, 2, Stage2Config(hidden=8), np.random.default_rng(0))
    p = predict(clf, graphs)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.array_equal(p, predict(clf, graphs))
    perm = np.random.default_rng(1).permutation(graphs[0].num_nodes)
    np.testing.assert_allclose(predict(clf, [graphs[0].permuted(perm)])[0], p[0], atol=1e-9)


def test_predict_width_mismatch():
    clf = InvariantClassifier(11, 2, Stage2Config(hidden=8), np.random.default_rng(0))
    g = graph_from_record({"id": "x", "num_nodes": 1, "node_features": [[1.0]], "label": 0})
    with pytest.raises(ContractError):
        predict(clf, [g])
