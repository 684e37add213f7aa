"""Stage 2: IRM-penalized graph classification on inferred environments."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Graph, batch_graphs, iterate_minibatches
from .errors import ContractError, DivergenceError, NumericError, ShapeError
from .gnn import GINEncoder, Linear, mean_pool
from .params import AdamState, ParamStore, adam_step
from .rng import RngStreams

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# risks and penalty


def _binary(logits: Tensor) -> bool:
    return logits.data.ndim == 1 or logits.shape[1] == 1


def per_sample_ce(logits, labels: np.ndarray) -> Tensor:
    """Cross-entropy per sample; a single logit column means sigmoid/BCE."""
    logits = ad.constant(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if _binary(logits):
        z = ad.reshape(logits, (labels.size,))
        y = labels.astype(np.float64)
        # BCE = log(1 + e^z) - y z, via log-sigmoid for stability
        lse = ad.logsumexp(ad.concat([ad.reshape(z, (-1, 1)), np.zeros((labels.size, 1))], axis=1), axis=1)
        return lse - z * y
    onehot = np.eye(logits.shape[1])[labels]
    return -ad.sum_(ad.log_softmax(logits, axis=1) * onehot, axis=1)


def dummy_gradient(logits, labels: np.ndarray) -> Tensor:
    """d/dw of the mean cross-entropy of ``w * logits`` at w = 1, as a taped scalar."""
    logits = ad.constant(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if _binary(logits):
        z = ad.reshape(logits, (labels.size,))
        return ad.mean((ad.sigmoid(z) - labels.astype(np.float64)) * z)
    onehot = np.eye(logits.shape[1])[labels]
    return ad.mean(ad.sum_((ad.softmax(logits, axis=1) - onehot) * logits, axis=1))


def _env_groups(env_ids: np.ndarray) -> list[tuple[int, np.ndarray]]:
    env_ids = np.asarray(env_ids)
    return [(int(e), np.flatnonzero(env_ids == e)) for e in np.unique(env_ids)]


def irm_penalty(logits, labels: np.ndarray, env_ids: np.ndarray, num_envs: int | None = None) -> Tensor:
    """Sum over environments of the squared dummy-classifier gradient.

    ``num_envs`` lets callers declare environments that may be absent from
    this batch; those are skipped with a warning.
    """
    logits = ad.constant(logits)
    labels = np.asarray(labels)
    env_ids = np.asarray(env_ids)
    if labels.shape[0] != logits.shape[0] or env_ids.shape[0] != logits.shape[0]:
        raise ShapeError("logits, labels and env_ids must have the same length")
    if num_envs is not None:
        missing = sorted(set(range(num_envs)) - set(np.unique(env_ids).tolist()))
        if missing:
            log.warning("irm_penalty: environments %s have no samples; skipped", missing)
    total = ad.Tensor(0.0)
    for _, idx in _env_groups(env_ids):
        g = dummy_gradient(ad.gather_rows(logits, idx), labels[idx])
        total = total + g * g
    return total


def invariant_loss(logits, labels: np.ndarray, env_ids: np.ndarray, lam: float) -> Tensor:
    """Batch-mean cross-entropy plus ``lam`` times the IRM penalty."""
    if lam < 0:
        raise ContractError("lambda must be non-negative")
    cls = ad.mean(per_sample_ce(logits, labels))
    if lam == 0:
        return cls
    return cls + irm_penalty(logits, labels, env_ids) * lam


@dataclass
class RiskReport:
    risks: dict[int, float]
    penalties: dict[int, float]
    counts: dict[int, int]


def risk_report(logits, labels: np.ndarray, env_ids: np.ndarray) -> RiskReport:
    logits = ad.constant(logits)
    labels = np.asarray(labels)
    risks, pens, counts = {}, {}, {}
    for e, idx in _env_groups(env_ids):
        sub = ad.gather_rows(logits, idx)
        risks[e] = float(ad.mean(per_sample_ce(sub, labels[idx])).item())
        pens[e] = float(dummy_gradient(sub, labels[idx]).item() ** 2)
        counts[e] = int(idx.size)
    return RiskReport(risks, pens, counts)


# ---------------------------------------------------------------------------
# classifier


@dataclass
class Stage2Config:
    hidden: int = 32
    num_layers: int = 3
    dropout: float = 0.5
    lam: float = 0.01
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 100
    patience: int = 20
    use_invariant_adjacency: bool = False


class InvariantClassifier:
    def __init__(self, feature_dim: int, num_classes: int, config: Stage2Config, rng: np.random.Generator):
        self.config = config
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        self.params = ParamStore()
        self.encoder = GINEncoder(self.params, "F.gin", feature_dim, config.hidden, config.num_layers, rng)
        self.head = Linear(self.params, "F.head", config.hidden, num_classes, rng)

    def logits(self, batch, rng: np.random.Generator | None = None, training: bool = False, adjacency=None) -> Tensor:
        if batch.features.shape[1] != self.feature_dim:
            raise ContractError(
                f"graphs have feature width {batch.features.shape[1]}, classifier expects {self.feature_dim}"
            )
        adj = batch.adjacency if adjacency is None else adjacency
        nodes = self.encoder.nodes(batch.features, adj)
        pooled = mean_pool(nodes, batch.pool_matrix())
        if training and self.config.dropout > 0:
            if rng is None:
                raise ContractError("dropout during training needs an rng")
            pooled = ad.dropout(pooled, 1.0 - self.config.dropout, rng)
        return self.head(pooled)


def predict(classifier: InvariantClassifier, graphs: Sequence[Graph], batch_size: int = 256) -> np.ndarray:
    """Class probabilities (n, C); deterministic, dropout off."""
    out = []
    for start in range(0, len(graphs), batch_size):
        batch = batch_graphs(graphs[start : start + batch_size])
        out.append(ad.softmax(classifier.logits(batch), axis=1).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, classifier.num_classes))


def write_predictions(path: str | Path, graphs: Sequence[Graph], probs: np.ndarray) -> None:
    with Path(path).open("w") as fh:
        for g, p in zip(graphs, probs):
            fh.write(json.dumps({"id": g.id, "probs": p.tolist()}, separators=(",", ":")) + "\n")


@dataclass
class Stage2History:
    train_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    best_epoch: int = -1


def train_stage2(
    train: Sequence[Graph],
    env_ids: np.ndarray,
    val: Sequence[Graph],
    num_classes: int,
    config: Stage2Config,
    streams: RngStreams,
    invariant_adjacency=None,
    dump_dir: str | Path | None = None,
) -> tuple[InvariantClassifier, Stage2History]:
    """Adam on cross-entropy + lam * IRM penalty; keeps the best-validation-accuracy checkpoint.

    ``invariant_adjacency`` (optional callable graph-list -> adjacency) swaps
    the full adjacency for a masked one when ``use_invariant_adjacency`` is set.
    """
    env_ids = np.asarray(env_ids)
    if env_ids.shape[0] != len(train):
        raise ContractError("environment assignments must cover the training set")
    model = InvariantClassifier(train[0].feature_dim, num_classes, config, streams.get("inv.init"))
    opt = AdamState(lr=config.lr)
    history = Stage2History()
    best_acc, best_state, waited = -1.0, model.params.state_dict(), 0
    order_rng, drop_rng = streams.get("inv.batch"), streams.get("inv.dropout")
    use_inv = config.use_invariant_adjacency and invariant_adjacency is not None
    for epoch in range(config.epochs):
        losses = []
        for idx in iterate_minibatches(len(train), config.batch_size, order_rng):
            chunk = [train[i] for i in idx]
            batch = batch_graphs(chunk)
            adj = invariant_adjacency(chunk) if use_inv else None
            try:
                logits = model.logits(batch, rng=drop_rng, training=True, adjacency=adj)
                loss = invariant_loss(logits, batch.labels, env_ids[idx], config.lam)
            except NumericError as exc:
                path = _dump(model.params, dump_dir)
                raise DivergenceError(f"stage-2 diverged at epoch {epoch}: {exc}", path) from exc
            model.params.zero_grad()
            ad.backward(loss)
            adam_step(model.params, opt)
            losses.append(loss.item())
        history.train_loss.append(float(np.mean(losses)))
        acc = accuracy_of(model, val) if val else -history.train_loss[-1]
        history.val_acc.append(acc)
        if acc > best_acc:
            best_acc, best_state, waited = acc, model.params.state_dict(), 0
            history.best_epoch = epoch
        else:
            waited += 1
            if waited >= config.patience:
                break
    model.params.load_state_dict(best_state)
    return model, history


def accuracy_of(model: InvariantClassifier, graphs: Sequence[Graph]) -> float:
    probs = predict(model, graphs)
    labels = np.array([g.label for g in graphs])
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def _dump(params: ParamStore, dump_dir) -> str | None:
    if dump_dir is None:
        return None
    path = Path(dump_dir) / "stage2_divergence_state.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    params.save(path)
    return str(path)
