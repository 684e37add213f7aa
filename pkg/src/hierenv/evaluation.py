"""Metrics, K-S diversity analysis, environment recovery and dependency diagnostics."""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError

log = logging.getLogger(__name__)


class UndefinedMetricError(ContractError):
    pass


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.ndim == 2:
        predictions = np.argmax(predictions, axis=1)
    if predictions.shape != labels.shape or labels.size == 0:
        raise ContractError("predictions and labels must be non-empty and the same length")
    return float(np.mean(predictions == labels))


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC-AUC needs both classes present")
    ranks = rankdata(scores)  # average ranks give ties half credit
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# Kolmogorov-Smirnov


def ks_statistic(a, b) -> float:
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ContractError("K-S test needs two non-empty samples")
    support = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, support, side="right") / a.size
    cdf_b = np.searchsorted(b, support, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


def kolmogorov_q(lam: float, tol: float = 1e-12, max_terms: int = 1000) -> float:
    """Q(lam) = 2 sum_{j>=1} (-1)^{j-1} exp(-2 j^2 lam^2); 1 where the series has not converged."""
    total = 0.0
    sign = 1.0
    for j in range(1, max_terms + 1):
        term = sign * 2.0 * math.exp(-2.0 * j * j * lam * lam)
        total += term
        if abs(term) < tol:
            return min(1.0, max(total, np.finfo(np.float64).tiny))
        sign = -sign
    return 1.0


def ks_two_sample(a, b) -> tuple[float, float]:
    """Two-sample K-S statistic D and its asymptotic p-value (with the small-sample correction)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = ks_statistic(a, b)
    m, n = a.size, b.size
    en = math.sqrt(m * n / (m + n))
    return d, kolmogorov_q((en + 0.12 + 0.11 / en) * d)


@dataclass
class DiversityReport:
    strategy: str
    envs: list[int]
    features: dict[int, np.ndarray]
    D: np.ndarray
    p: np.ndarray
    inter_env_distance: float

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "envs": self.envs,
            "D": self.D.tolist(),
            "p": self.p.tolist(),
            "inter_env_distance": self.inter_env_distance,
        }


def diversity_report(features, env_ids, strategy: str = "") -> DiversityReport:
    """Pairwise K-S statistics between per-environment feature samples."""
    features = np.asarray(features, dtype=np.float64)
    env_ids = np.asarray(env_ids)
    if features.shape != env_ids.shape:
        raise ContractError("features and env_ids must align")
    groups = {}
    for e in np.unique(env_ids):
        vals = features[env_ids == e]
        if vals.size < 2:
            log.warning("%s: environment %s has %d sample(s); skipped", strategy, e, vals.size)
            continue
        groups[int(e)] = vals
    envs = sorted(groups)
    m = len(envs)
    D = np.zeros((m, m))
    p = np.ones((m, m))
    for i, j in itertools.combinations(range(m), 2):
        d, pv = ks_two_sample(groups[envs[i]], groups[envs[j]])
        D[i, j] = D[j, i] = d
        p[i, j] = p[j, i] = pv
    if m < 2:
        log.warning("%s: fewer than two usable environments; inter-env distance set to 0", strategy)
        dist = 0.0
    else:
        dist = float(D[~np.eye(m, dtype=bool)].mean())
    return DiversityReport(strategy, envs, groups, D, p, dist)


# ---------------------------------------------------------------------------
# environment diagnostics


def env_recovery_score(assignment, truth) -> float:
    """Best agreement over one-to-one relabelings (exhaustive; at most 8 labels per side)."""
    assignment = np.asarray(assignment)
    truth = np.asarray(truth)
    if assignment.shape != truth.shape or assignment.size == 0:
        raise ContractError("assignment and truth must be non-empty and aligned")
    a_labels, a_idx = np.unique(assignment, return_inverse=True)
    t_labels, t_idx = np.unique(truth, return_inverse=True)
    size = max(a_labels.size, t_labels.size)
    if size > 8:
        raise ContractError(f"exhaustive permutation search limited to 8 labels, got {size}")
    confusion = np.zeros((size, size))
    np.add.at(confusion, (a_idx, t_idx), 1)
    rows = np.arange(size)
    best = max(confusion[rows, list(perm)].sum() for perm in itertools.permutations(range(size)))
    return float(best / assignment.size)


def _entropy(counts: np.ndarray) -> float:
    total = counts.sum()
    probs = counts[counts > 0] / total
    return float(-(probs * np.log(probs)).sum())


def env_label_dependency(assignment, labels) -> float:
    """Plug-in H(Y) - H(Y | E) in nats."""
    assignment = np.asarray(assignment)
    labels = np.asarray(labels)
    if assignment.shape != labels.shape or labels.size == 0:
        raise ContractError("assignment and labels must be non-empty and aligned")
    _, e_idx = np.unique(assignment, return_inverse=True)
    _, y_idx = np.unique(labels, return_inverse=True)
    table = np.zeros((e_idx.max() + 1, y_idx.max() + 1))
    np.add.at(table, (e_idx, y_idx), 1)
    n = labels.size
    h_y = _entropy(table.sum(axis=0))
    h_y_given_e = sum(row.sum() / n * _entropy(row) for row in table)
    return h_y - h_y_given_e
