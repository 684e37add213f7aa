"""GIN encoders, MLPs, mean-pool readout and the two projection heads."""
from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError
from .params import ParamStore

log = logging.getLogger(__name__)


class Linear:
    def __init__(self, store: ParamStore, prefix: str, n_in: int, n_out: int, rng: np.random.Generator):
        self.weight = store.uniform(f"{prefix}.weight", (n_in, n_out), rng)
        self.bias = store.zeros(f"{prefix}.bias", (n_out,))

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x) -> Tensor:
        return ad.matmul(x, self.weight) + self.bias


class MLP:
    """Stack of linear layers with ReLU between them (none after the last)."""

    def __init__(self, store: ParamStore, prefix: str, sizes: Sequence[int], rng: np.random.Generator):
        if len(sizes) < 2:
            raise ContractError("an MLP needs at least input and output sizes")
        self.layers = [
            Linear(store, f"{prefix}.{i}", sizes[i], sizes[i + 1], rng) for i in range(len(sizes) - 1)
        ]

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    def __call__(self, x) -> Tensor:
        for i, layer in enumerate(self.layers):
            if i:
                x = ad.relu(x)
            x = layer(x)
        return x


class GINLayer:
    """h'_i = MLP((1 + eps) h_i + sum_j A_ij h_j) with a learnable scalar eps."""

    def __init__(self, store: ParamStore, prefix: str, n_in: int, hidden: int, rng: np.random.Generator):
        self.eps = store.zeros(f"{prefix}.eps", (1,))
        self.mlp = MLP(store, f"{prefix}.mlp", [n_in, hidden, hidden], rng)

    def __call__(self, h, adjacency) -> Tensor:
        h = ad.constant(h)
        adjacency = ad.constant(adjacency)
        n = h.shape[0]
        if h.data.ndim != 2 or h.shape[1] != self.mlp.n_in:
            raise ShapeError(f"GIN layer expects (N, {self.mlp.n_in}) input, got {h.shape}")
        if adjacency.shape != (n, n):
            raise ShapeError(f"adjacency {adjacency.shape} does not match {n} nodes")
        agg = h * (1.0 + self.eps) + ad.matmul(adjacency, h)
        return self.mlp(agg)


def gin_layer_forward(h, adjacency, layer: GINLayer) -> Tensor:
    return layer(h, adjacency)


class GINEncoder:
    def __init__(
        self, store: ParamStore, prefix: str, n_in: int, hidden: int, num_layers: int, rng: np.random.Generator
    ):
        if num_layers < 1:
            raise ContractError("encoder needs at least one layer")
        self.layers = [
            GINLayer(store, f"{prefix}.gin{i}", n_in if i == 0 else hidden, hidden, rng)
            for i in range(num_layers)
        ]
        self.hidden = hidden

    def nodes(self, h, adjacency) -> Tensor:
        for layer in self.layers:
            h = ad.relu(layer(h, adjacency))
        return h


def mean_pool(node_embeddings, pool: np.ndarray) -> Tensor:
    return ad.matmul(pool, node_embeddings)


def encode_graph(batch, encoder: GINEncoder, adjacency_override=None, h0=None) -> tuple[Tensor, Tensor]:
    """Run the encoder on a batch (optionally on a masked adjacency) and mean-pool per graph."""
    adjacency = batch.adjacency
    if adjacency_override is not None:
        if tuple(adjacency_override.shape) != adjacency.shape:
            raise ShapeError(
                f"adjacency override {tuple(adjacency_override.shape)} != batch adjacency {adjacency.shape}"
            )
        adjacency = adjacency_override
    h = batch.features if h0 is None else h0
    nodes = encoder.nodes(h, adjacency)
    return nodes, mean_pool(nodes, batch.pool_matrix())


class ProjectionHead:
    """MLP followed by row-wise l2 normalization."""

    def __init__(self, store: ParamStore, prefix: str, n_in: int, out: int, rng: np.random.Generator):
        self.mlp = MLP(store, prefix, [n_in, n_in, out], rng)
        self.prefix = prefix

    def __call__(self, graph_embeddings) -> Tensor:
        raw = self.mlp(graph_embeddings)
        norms = np.sqrt((raw.data**2).sum(axis=1))
        if np.any(norms < 1e-12):
            log.warning("%s: %d zero-norm rows before normalization", self.prefix, int((norms < 1e-12).sum()))
        return ad.l2_normalize(raw, axis=1, eps=1e-12)


def project(graph_embeddings, heads: dict[str, ProjectionHead], head: str) -> Tensor:
    if head not in ("variant", "invariant"):
        raise ContractError(f"head must be 'variant' or 'invariant', got {head!r}")
    return heads[head](graph_embeddings)
