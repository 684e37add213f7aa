"""Graph records, JSONL I/O, batching, splitting and the synthetic motif benchmark."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, ParseError
from .rng import make_generator

MAX_DEGREE = 10
FEATURE_DIM = MAX_DEGREE + 1
NUM_MOTIFS = 8
MOTIFS_PER_FAMILY = 4


@dataclass
class Graph:
    id: str
    node_features: np.ndarray  # (n, d)
    adjacency: np.ndarray  # (n, n) symmetric 0/1, zero diagonal
    label: int
    true_env: int | None = None
    true_family: int | None = None

    @property
    def num_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.node_features.shape[1]

    def edges(self) -> list[tuple[int, int]]:
        rows, cols = np.nonzero(np.triu(self.adjacency, k=1))
        return list(zip(rows.tolist(), cols.tolist()))

    def to_record(self) -> dict:
        rec = {
            "id": self.id,
            "num_nodes": self.num_nodes,
            "edges": [list(e) for e in self.edges()],
            "node_features": self.node_features.tolist(),
            "label": int(self.label),
        }
        if self.true_env is not None:
            rec["true_env"] = int(self.true_env)
        if self.true_family is not None:
            rec["true_family"] = int(self.true_family)
        return rec

    def permuted(self, perm: Sequence[int]) -> "Graph":
        """Relabel nodes so that new node ``i`` is old node ``perm[i]``."""
        perm = np.asarray(perm)
        return Graph(
            id=self.id,
            node_features=self.node_features[perm],
            adjacency=self.adjacency[np.ix_(perm, perm)],
            label=self.label,
            true_env=self.true_env,
            true_family=self.true_family,
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.id == other.id
            and self.label == other.label
            and self.true_env == other.true_env
            and self.true_family == other.true_family
            and np.array_equal(self.adjacency, other.adjacency)
            and np.array_equal(self.node_features, other.node_features)
        )


def graph_from_record(rec: dict, line: int | None = None, path: str | None = None) -> Graph:
    def fail(msg):
        raise ParseError(msg, line=line, path=path)

    try:
        n = int(rec["num_nodes"])
        feats = np.asarray(rec["node_features"], dtype=np.float64)
        label = int(rec["label"])
        gid = str(rec["id"])
        edges = rec.get("edges", [])
    except (KeyError, TypeError, ValueError) as exc:
        fail(f"missing or malformed field: {exc}")
    if n <= 0:
        fail("num_nodes must be positive")
    if feats.ndim != 2 or feats.shape[0] != n:
        fail(f"node_features must be a {n} x d matrix with equal-width rows")
    if label < 0:
        fail("label must be non-negative")
    adj = np.zeros((n, n), dtype=np.float64)
    for e in edges:
        if not isinstance(e, (list, tuple)) or len(e) != 2:
            fail(f"edge {e!r} is not a pair")
        i, j = int(e[0]), int(e[1])
        if i == j:
            fail(f"self-loop on node {i}")
        if not (0 <= i < n and 0 <= j < n):
            fail(f"edge {e!r} out of range for {n} nodes")
        if adj[i, j]:
            fail(f"duplicate edge {e!r}")
        adj[i, j] = adj[j, i] = 1.0
    true_env = rec.get("true_env")
    true_family = rec.get("true_family")
    return Graph(
        id=gid,
        node_features=feats,
        adjacency=adj,
        label=label,
        true_env=None if true_env is None else int(true_env),
        true_family=None if true_family is None else int(true_family),
    )


def load_graphs(path: str | Path) -> list[Graph]:
    path = Path(path)
    graphs: list[Graph] = []
    width = None
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON: {exc.msg}", line=lineno, path=str(path)) from exc
            if not isinstance(rec, dict):
                raise ParseError("expected a JSON object", line=lineno, path=str(path))
            g = graph_from_record(rec, line=lineno, path=str(path))
            if width is None:
                width = g.feature_dim
            elif g.feature_dim != width:
                raise ParseError(
                    f"feature width {g.feature_dim} differs from {width}", line=lineno, path=str(path)
                )
            graphs.append(g)
    return graphs


def save_graphs(path: str | Path, graphs: Iterable[Graph]) -> None:
    with Path(path).open("w") as fh:
        for g in graphs:
            fh.write(json.dumps(g.to_record(), separators=(",", ":")) + "\n")


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    graphs: list[Graph]
    adjacency: np.ndarray  # block diagonal (N, N)
    features: np.ndarray  # (N, d)
    node_to_graph: np.ndarray  # (N,)
    labels: np.ndarray  # (B,)
    offsets: np.ndarray  # (B + 1,)
    edge_rows: np.ndarray = field(repr=False)  # upper-triangle edges in batch indexing
    edge_cols: np.ndarray = field(repr=False)

    @property
    def num_graphs(self) -> int:
        return len(self.graphs)

    @property
    def num_nodes(self) -> int:
        return self.adjacency.shape[0]

    def pool_matrix(self) -> np.ndarray:
        """(B, N) matrix whose product with node embeddings gives per-graph means."""
        counts = np.diff(self.offsets)
        pool = np.zeros((self.num_graphs, self.num_nodes))
        pool[self.node_to_graph, np.arange(self.num_nodes)] = 1.0 / counts[self.node_to_graph]
        return pool

    def unbatch(self, adjacency: np.ndarray | None = None) -> list[Graph]:
        adjacency = self.adjacency if adjacency is None else adjacency
        out = []
        for b, g in enumerate(self.graphs):
            lo, hi = self.offsets[b], self.offsets[b + 1]
            out.append(
                Graph(
                    id=g.id,
                    node_features=self.features[lo:hi].copy(),
                    adjacency=adjacency[lo:hi, lo:hi].copy(),
                    label=int(self.labels[b]),
                    true_env=g.true_env,
                    true_family=g.true_family,
                )
            )
        return out


def batch_graphs(graphs: Sequence[Graph]) -> Batch:
    if not graphs:
        raise ContractError("cannot batch an empty list of graphs")
    width = graphs[0].feature_dim
    for g in graphs:
        if g.feature_dim != width:
            raise ContractError(f"graph {g.id} has feature width {g.feature_dim}, expected {width}")
    sizes = np.array([g.num_nodes for g in graphs])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    adj = np.zeros((total, total))
    for b, g in enumerate(graphs):
        lo, hi = offsets[b], offsets[b + 1]
        adj[lo:hi, lo:hi] = g.adjacency
    rows, cols = np.nonzero(np.triu(adj, k=1))
    return Batch(
        graphs=list(graphs),
        adjacency=adj,
        features=np.concatenate([g.node_features for g in graphs], axis=0),
        node_to_graph=np.repeat(np.arange(len(graphs)), sizes),
        labels=np.array([g.label for g in graphs], dtype=np.int64),
        offsets=offsets,
        edge_rows=rows,
        edge_cols=cols,
    )


def split_dataset(graphs: Sequence[Graph], fractions: Sequence[float], seed: int) -> list[list[Graph]]:
    """Disjoint, exhaustive, seed-deterministic partitions in the given proportions."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.ndim != 1 or len(fractions) == 0 or np.any(fractions < 0):
        raise ContractError("fractions must be a non-empty list of non-negative numbers")
    if abs(fractions.sum() - 1.0) > 1e-9:
        raise ContractError(f"fractions must sum to 1, got {fractions.sum()}")
    n = len(graphs)
    order = make_generator(seed, "split").permutation(n)
    cuts = np.floor(np.cumsum(fractions) * n + 1e-9).astype(int)
    cuts[-1] = n
    parts, start = [], 0
    for stop in cuts:
        parts.append([graphs[i] for i in sorted(order[start:stop])])
        start = stop
    return parts


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator, shuffle: bool = True):
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


# ---------------------------------------------------------------------------
# synthetic spurious-motif benchmark


@dataclass
class SyntheticConfig:
    n_train: int = 1000
    n_val: int = 200
    n_test: int = 500
    rho_train: float = 0.9
    rho_test: float = 0.1
    label_flip_prob: float = 0.05
    seed: int = 1

    def validate(self) -> None:
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        for name in ("rho_train", "rho_test", "label_flip_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1], got {v}")


def cycle_edges(n: int) -> list[tuple[int, int]]:
    return [(i, (i + 1) % n) for i in range(n)]


def house_edges() -> list[tuple[int, int]]:
    # square 0-1-2-3 with roof node 4 on top of 2-3
    return [(0, 1), (1, 2), (2, 3), (3, 0), (2, 4), (3, 4)]


def path_edges(n: int) -> list[tuple[int, int]]:
    return [(i, i + 1) for i in range(n - 1)]


def clique_edges(n: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


def variant_motif(motif_id: int) -> tuple[int, list[tuple[int, int]]]:
    """Motif ids 0-3 are paths on 3..6 nodes, ids 4-7 cliques on 3..6 nodes."""
    if not 0 <= motif_id < NUM_MOTIFS:
        raise ContractError(f"motif id {motif_id} out of range")
    size = 3 + motif_id % MOTIFS_PER_FAMILY
    edges = path_edges(size) if motif_id < MOTIFS_PER_FAMILY else clique_edges(size)
    return size, edges


def degree_features(adjacency: np.ndarray) -> np.ndarray:
    deg = np.minimum(adjacency.sum(axis=1).astype(int), MAX_DEGREE)
    feats = np.zeros((adjacency.shape[0], FEATURE_DIM))
    feats[np.arange(adjacency.shape[0]), deg] = 1.0
    return feats


def make_motif_graph(gid: str, rng: np.random.Generator, rho: float, flip: float) -> Graph:
    y_true = int(rng.integers(2))
    family = y_true if rng.random() < rho else 1 - y_true
    motif_id = family * MOTIFS_PER_FAMILY + int(rng.integers(MOTIFS_PER_FAMILY))

    if y_true == 0:
        n_label, label_e = 5, cycle_edges(5)
    else:
        n_label, label_e = 5, house_edges()
    n_var, var_e = variant_motif(motif_id)
    n_core = n_label + n_var
    n = n_core + 2

    edges = set()
    for i, j in label_e:
        edges.add((min(i, j), max(i, j)))
    for i, j in var_e:
        edges.add((n_label + i, n_label + j))
    while len(edges) < len(label_e) + len(var_e) + 2:
        u = int(rng.integers(n_label))
        v = n_label + int(rng.integers(n_var))
        edges.add((u, v))
    for noise in (n_core, n_core + 1):
        edges.add((int(rng.integers(n_core)), noise))

    adj = np.zeros((n, n))
    for i, j in edges:
        adj[i, j] = adj[j, i] = 1.0
    label = 1 - y_true if rng.random() < flip else y_true
    return Graph(
        id=gid,
        node_features=degree_features(adj),
        adjacency=adj,
        label=label,
        true_env=motif_id,
        true_family=family,
    )


def generate_split(name: str, count: int, rho: float, flip: float, seed: int) -> list[Graph]:
    split_index = {"train": 0, "val": 1, "test": 2}.get(name, 3)
    return [
        make_motif_graph(f"{name}-{i:05d}", make_generator(seed, "data", split_index, i), rho, flip)
        for i in range(count)
    ]


def generate_synthetic(config: SyntheticConfig) -> tuple[list[Graph], list[Graph], list[Graph]]:
    config.validate()
    c = config
    return (
        generate_split("train", c.n_train, c.rho_train, c.label_flip_prob, c.seed),
        generate_split("val", c.n_val, c.rho_train, c.label_flip_prob, c.seed),
        generate_split("test", c.n_test, c.rho_test, c.label_flip_prob, c.seed),
    )


# ---------------------------------------------------------------------------
# dataset manifest


@dataclass
class Dataset:
    train: list[Graph]
    val: list[Graph]
    test: list[Graph]
    num_classes: int
    feature_dim: int


def write_dataset(out_dir: str | Path, train, val, test, num_classes: int = 2) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, graphs in (("train", train), ("val", val), ("test", test)):
        save_graphs(out_dir / f"{name}.jsonl", graphs)
    manifest = {
        "train": "train.jsonl",
        "val": "val.jsonl",
        "test": "test.jsonl",
        "num_classes": num_classes,
        "feature_dim": int(train[0].feature_dim),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(manifest_path: str | Path) -> Dataset:
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed manifest: {exc.msg}", path=str(manifest_path)) from exc
    base = manifest_path.parent
    splits = {}
    for name in ("train", "val", "test"):
        p = Path(doc[name])
        splits[name] = load_graphs(p if p.is_absolute() else base / p)
    ds = Dataset(num_classes=int(doc["num_classes"]), feature_dim=int(doc["feature_dim"]), **splits)
    for name, graphs in splits.items():
        for g in graphs:
            if g.feature_dim != ds.feature_dim:
                raise ParseError(f"{name} graph {g.id} has width {g.feature_dim}, manifest says {ds.feature_dim}")
            if g.label >= ds.num_classes:
                raise ParseError(f"{name} graph {g.id} has label {g.label} >= num_classes")
    return ds
