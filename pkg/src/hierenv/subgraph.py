"""Hierarchical stochastic subgraph generation.

At each level an edge scorer turns node embeddings into selection
probabilities, Gumbel-Softmax perturbs them, and a cumulative neighbor
mask records every edge whose perturbed probability exceeds the
threshold.  The mask splits the adjacency into a variant part
(``A * N``) and an invariant remainder.

Masks are kept per edge of the batch's upper-triangle edge list; the
dense n x n matrices are materialized only where the encoders need them.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .gnn import MLP, GINEncoder

log = logging.getLogger(__name__)

S_CLAMP = 1e-6
_clamp_warned = False


@dataclass
class HierarchyConfig:
    num_envs: list[int] = field(default_factory=lambda: [8, 4, 2])
    threshold: float = 0.6
    tau_gumbel: float = 0.05
    tau_contrastive: float = 0.5
    alpha: float = 1.0
    beta: float = 1.0
    lam: float = 0.01
    diversity_bonus: float = 0.0

    @property
    def K(self) -> int:
        return len(self.num_envs)

    def validate(self) -> None:
        if self.K < 1:
            raise ContractError("need at least one hierarchy")
        if any(e < 1 for e in self.num_envs):
            raise ContractError("environment counts must be positive")
        if any(b >= a for a, b in zip(self.num_envs, self.num_envs[1:])):
            raise ContractError(f"environment counts must strictly decrease, got {self.num_envs}")
        if not 0.0 < self.threshold < 1.0:
            raise ContractError("threshold T must lie in (0, 1)")
        if self.tau_gumbel <= 0 or self.tau_contrastive <= 0:
            raise ContractError("temperatures must be positive")
        if self.lam < 0 or self.alpha < 0 or self.beta < 0 or self.diversity_bonus < 0:
            raise ContractError("loss weights must be non-negative")


def edge_scorer(store, prefix: str, hidden: int, rng: np.random.Generator) -> MLP:
    """Two-layer ReLU MLP on the symmetric pair features [h_i + h_j, |h_i - h_j|]."""
    return MLP(store, prefix, [2 * hidden, hidden, 1], rng)


def score_edges(h, adjacency: np.ndarray, rows: np.ndarray, cols: np.ndarray, scorer: MLP) -> Tensor:
    """Selection probability s_ij = sigmoid(MLP(pair features)) for each listed edge."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if rows.size and not np.all(adjacency[rows, cols] == 1):
        raise ContractError("score_edges called on a pair that is not an edge")
    hi = ad.gather_rows(h, rows)
    hj = ad.gather_rows(h, cols)
    pair = ad.concat([hi + hj, ad.abs_(hi - hj)], axis=1)
    return ad.reshape(ad.sigmoid(scorer(pair)), (rows.size,))


def sample_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    tiny = np.finfo(np.float64).tiny
    u = np.clip(rng.random(shape), tiny, 1.0 - np.finfo(np.float64).epsneg)
    return -np.log(-np.log(u))


def gumbel_select(s, tau: float, rng: np.random.Generator | None = None, noise=None) -> Tensor:
    """Two-category Gumbel-Softmax probability of the 'select' category.

    ``noise`` may supply (g1, g0) explicitly; otherwise both are drawn from ``rng``.
    """
    if tau <= 0:
        raise ContractError("Gumbel temperature must be positive")
    s = ad.constant(s)
    if np.any((s.data < S_CLAMP) | (s.data > 1.0 - S_CLAMP)):
        global _clamp_warned
        # once per process at warning level; training can hit this every batch
        log.log(logging.DEBUG if _clamp_warned else logging.WARNING, "edge scores clamped to [%g, 1 - %g] before log", S_CLAMP, S_CLAMP)
        _clamp_warned = True
        s = ad.clip(s, S_CLAMP, 1.0 - S_CLAMP)
    if noise is None:
        if rng is None:
            raise ContractError("gumbel_select needs an rng or explicit noise")
        g1 = sample_gumbel(rng, s.shape)
        g0 = sample_gumbel(rng, s.shape)
    else:
        g1, g0 = (np.broadcast_to(np.asarray(g, dtype=np.float64), s.shape) for g in noise)
    # exp(a/tau) / (exp(a/tau) + exp(b/tau)) == sigmoid((a - b) / tau)
    logit = (ad.log(s) + g1 - ad.log(1.0 - s) - g0) * (1.0 / tau)
    return ad.sigmoid(logit)


def update_mask(prev, p_hat, threshold: float) -> np.ndarray:
    """N^k = N^{k-1} + 1{N^{k-1} == 0 and p_hat > T}, elementwise."""
    prev = np.asarray(prev, dtype=np.float64)
    p = p_hat.data if isinstance(p_hat, Tensor) else np.asarray(p_hat, dtype=np.float64)
    return prev + ((prev == 0) & (p > threshold)).astype(np.float64)


@dataclass
class SubgraphPair:
    variant: np.ndarray
    invariant: np.ndarray


def split_adjacency(adjacency: np.ndarray, mask: np.ndarray) -> SubgraphPair:
    if adjacency.shape != mask.shape:
        raise ContractError(f"mask shape {mask.shape} != adjacency shape {adjacency.shape}")
    variant = adjacency * mask
    return SubgraphPair(variant=variant, invariant=adjacency - variant)


def mask_matrix(edge_mask: np.ndarray, rows: np.ndarray, cols: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n, n))
    out[rows, cols] = edge_mask
    out[cols, rows] = edge_mask
    return out


@dataclass
class LevelOutput:
    k: int
    nodes: Tensor  # h^k
    scores: Tensor  # s per edge
    p_hat: Tensor  # perturbed (training) or plain scores (inference) per edge
    edge_mask: np.ndarray  # N^k per edge, binary
    new_edges: np.ndarray  # edges first selected at this level
    variant_adj: Tensor  # A_v^k (straight-through carrier when enabled)
    invariant_adj: Tensor  # A_inv^k

    def mask(self, rows, cols, n) -> np.ndarray:
        return mask_matrix(self.edge_mask, rows, cols, n)


def generate_hierarchy(
    batch,
    encoders: list[GINEncoder],
    scorers: list[MLP],
    config: HierarchyConfig,
    rng: np.random.Generator | None = None,
    stochastic: bool = True,
    straight_through: bool = True,
) -> list[LevelOutput]:
    """Run all K levels on a batch.

    With ``stochastic=False`` the Gumbel draw is skipped and the plain
    score is thresholded, which makes the result deterministic.  The
    straight-through carrier keeps the forward value of the variant
    adjacency binary while routing gradient through ``p_hat`` on the
    edges newly selected at that level.
    """
    if len(encoders) != config.K or len(scorers) != config.K:
        raise ContractError("need one encoder and one scorer per hierarchy")
    A = batch.adjacency
    rows, cols, n = batch.edge_rows, batch.edge_cols, batch.num_nodes
    h = ad.constant(batch.features)
    prev = np.zeros(rows.size)
    outputs = []
    for k in range(config.K):
        h = encoders[k].nodes(h, A)
        s = score_edges(h, A, rows, cols, scorers[k])
        p_hat = gumbel_select(s, config.tau_gumbel, rng) if stochastic else s
        mask = update_mask(prev, p_hat, config.threshold)
        new = (mask - prev).astype(bool)
        if straight_through and np.any(new):
            carrier = mask + (p_hat - ad.detach(p_hat)) * new.astype(np.float64)
            variant = ad.scatter_symmetric(carrier, rows, cols, n)
        else:
            variant = ad.constant(mask_matrix(mask, rows, cols, n))
        invariant = ad.sub(A, variant)
        outputs.append(LevelOutput(k + 1, h, s, p_hat, mask, new, variant, invariant))
        prev = mask
    return outputs
