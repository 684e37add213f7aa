"""Stage 1: hierarchical environment inference.

Per level ``k`` the model owns a GIN encoder, an edge scorer, a variant
and an invariant projection head (the subgraph side, ``s``) and an
environment classifier ``f^k`` fed with the projected variant embedding
and the one-hot label.  The objective summed over levels is

    L_ED^k + alpha * L_EnvCon^k + beta * L_LabelCon^k.
"""
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
from .errors import ContractError, DivergenceError, NumericError
from .gnn import MLP, GINEncoder, ProjectionHead, mean_pool
from .params import AdamState, ParamStore, adam_step
from .rng import RngStreams
from .subgraph import HierarchyConfig, LevelOutput, generate_hierarchy

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# posterior and diversification loss

NORM_EPS = 1e-6


class InputNorm:
    """Per-feature standardization of ``z_v`` ahead of an environment classifier.

    Training batches use their own (differentiable) statistics.  Deterministic
    inference uses fixed statistics stored in the parameter store, recomputed
    by :meth:`Stage1Model.calibrate` from a deterministic pass, because the
    Gumbel-sampled training subgraphs differ from the thresholded ones.  They
    never receive gradient, which leaves them untouched by Adam.
    """

    def __init__(self, params: ParamStore, name: str, dim: int):
        self.mean = params.zeros(f"{name}.mean", (1, dim))
        self.var = params.add(f"{name}.var", np.ones((1, dim)))

    def __call__(self, z, batch_stats: bool) -> Tensor:
        if batch_stats:
            centered = z - ad.mean(z, axis=0, keepdims=True)
            var = ad.mean(centered * centered, axis=0, keepdims=True)
            return centered * ad.exp(ad.log(var + NORM_EPS) * -0.5)
        return (z - ad.constant(self.mean.data)) * ad.constant(1.0 / np.sqrt(self.var.data + NORM_EPS))

    def set_stats(self, z: np.ndarray) -> None:
        self.mean.data = z.mean(axis=0, keepdims=True)
        self.var.data = z.var(axis=0, keepdims=True)


def env_posterior(z_v, labels: np.ndarray, classifier: MLP, num_classes: int) -> tuple[Tensor, np.ndarray]:
    """Log-posterior over environments and the hard (lowest-index argmax) assignment."""
    n_envs = classifier.layers[-1].weight.shape[1]
    if n_envs < 2:
        raise ContractError(f"need at least 2 environments for a posterior, got {n_envs}")
    onehot = np.eye(num_classes)[np.asarray(labels, dtype=np.int64)]
    logits = classifier(ad.concat([z_v, onehot], axis=1))
    log_post = ad.log_softmax(logits, axis=1)
    return log_post, np.argmax(log_post.data, axis=1)


def loss_ed(log_post: Tensor, diversity_bonus: float = 0.0) -> Tensor:
    """Negated batch mean of the max log-posterior.

    ``diversity_bonus`` > 0 subtracts that multiple of the entropy of the
    batch-averaged posterior, discouraging collapse onto one environment.
    """
    loss = -ad.mean(ad.max_(log_post, axis=1))
    if diversity_bonus:
        avg = ad.mean(ad.exp(log_post), axis=0)
        entropy = -ad.sum_(avg * ad.log(ad.clip(avg, 1e-12, 1.0)))
        loss = loss - entropy * diversity_bonus
    return loss


# ---------------------------------------------------------------------------
# neighborhoods and contrastive losses


def build_env_neighborhood(envs: np.ndarray, prev: np.ndarray | None = None) -> np.ndarray:
    """(B, B) boolean positives: same hard environment, anchor excluded, unioned with ``prev``."""
    envs = np.asarray(envs)
    same = envs[:, None] == envs[None, :]
    np.fill_diagonal(same, False)
    return same if prev is None else same | prev


def build_label_neighborhood(labels: np.ndarray) -> np.ndarray:
    return build_env_neighborhood(labels)


def candidate_mask(batch_size: int) -> np.ndarray:
    return ~np.eye(batch_size, dtype=bool)


def info_nce(anchor, positives, candidates, tau: float) -> Tensor:
    """Mean over positives of -log(exp(z.p / tau) / sum_n exp(z.n / tau)).

    ``positives`` is (P, d) and ``candidates`` (C, d); an empty positive set gives 0.
    """
    anchor = ad.reshape(ad.constant(anchor), (1, -1))
    positives = ad.constant(positives)
    candidates = ad.constant(candidates)
    if candidates.shape[0] == 0:
        raise ContractError("info_nce needs at least one candidate")
    if positives.shape[0] == 0:
        return ad.Tensor(0.0)
    sim_c = ad.matmul(anchor, ad.transpose(candidates)) * (1.0 / tau)
    sim_p = ad.matmul(anchor, ad.transpose(positives)) * (1.0 / tau)
    shift = sim_c.data.max()
    lse = ad.logsumexp(sim_c - shift, axis=1)
    return ad.reshape(lse - ad.mean(sim_p - shift, axis=1), ())


def info_nce_batch(z, positives: np.ndarray, tau: float, candidates: np.ndarray | None = None) -> Tensor:
    """Batched multi-positive InfoNCE averaged over anchors with a non-empty positive set."""
    z = ad.constant(z)
    n = z.shape[0]
    candidates = candidate_mask(n) if candidates is None else candidates
    positives = np.asarray(positives, dtype=bool)
    counts = positives.sum(axis=1)
    valid = counts > 0
    if not np.any(valid):
        return ad.Tensor(0.0)
    sim = ad.matmul(z, ad.transpose(z)) * (1.0 / tau)
    # row shift keeps the uniform-similarity case exact; the loss is shift-invariant
    shift = np.where(candidates, sim.data, -np.inf).max(axis=1, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    shifted = sim - shift
    lse = ad.logsumexp(shifted, axis=1, mask=candidates)
    pos_mean = ad.sum_(shifted * positives.astype(np.float64), axis=1) * (1.0 / np.maximum(counts, 1))
    per_anchor = lse - pos_mean
    weights = valid.astype(np.float64) / valid.sum()
    return ad.sum_(per_anchor * weights)


def loss_envcon(z_v, env_neighborhood: np.ndarray, tau: float) -> Tensor:
    return info_nce_batch(z_v, env_neighborhood, tau)


def loss_labelcon(z_inv, label_neighborhood: np.ndarray, tau: float) -> Tensor:
    return info_nce_batch(z_inv, label_neighborhood, tau)


def loss_hier(l_ed, l_envcon, l_labelcon, alpha: float, beta: float) -> Tensor:
    return ad.constant(l_ed) + ad.constant(l_envcon) * alpha + ad.constant(l_labelcon) * beta


def loss_hei(level_losses: Sequence) -> Tensor:
    total = ad.constant(level_losses[0])
    for extra in level_losses[1:]:
        total = total + extra
    return total


# ---------------------------------------------------------------------------
# model


@dataclass
class Stage1Config:
    hierarchy: HierarchyConfig = field(default_factory=HierarchyConfig)
    hidden: int = 32
    proj_dim: int = 16
    num_layers: int = 1
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 100
    patience: int = 20


@dataclass
class Level:
    encoder: GINEncoder
    scorer: MLP
    head_variant: ProjectionHead
    head_invariant: ProjectionHead
    classifier: MLP | None  # None when the level has a single environment
    num_envs: int
    norm: InputNorm | None = None


@dataclass
class LevelResult:
    subgraph: LevelOutput
    z_variant: Tensor
    z_invariant: Tensor
    log_post: Tensor | None
    envs: np.ndarray
    env_sets: np.ndarray
    l_ed: Tensor
    l_envcon: Tensor
    l_labelcon: Tensor
    l_hier: Tensor

    @property
    def posterior(self) -> np.ndarray:
        if self.log_post is None:
            return np.ones((self.envs.size, 1))
        return np.exp(self.log_post.data)


@dataclass
class Stage1Output:
    levels: list[LevelResult]
    label_sets: np.ndarray
    total: Tensor


class Stage1Model:
    """Subgraph generators (``s.*`` parameters) and environment classifiers (``f.*``)."""

    def __init__(self, feature_dim: int, num_classes: int, config: Stage1Config, rng: np.random.Generator):
        config.hierarchy.validate()
        self.config = config
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.params = ParamStore()
        H, P = config.hidden, config.proj_dim
        self.levels: list[Level] = []
        for k, n_envs in enumerate(config.hierarchy.num_envs, start=1):
            p = self.params
            encoder = GINEncoder(p, f"s.level{k}.gin", feature_dim if k == 1 else H, H, config.num_layers, rng)
            scorer = MLP(p, f"s.level{k}.scorer", [2 * H, H, 1], rng)
            head_v = ProjectionHead(p, f"s.level{k}.head_variant", H, P, rng)
            head_i = ProjectionHead(p, f"s.level{k}.head_invariant", H, P, rng)
            clf = MLP(p, f"f.level{k}", [P + num_classes, H, n_envs], rng) if n_envs > 1 else None
            norm = InputNorm(p, f"f.level{k}.norm", P) if n_envs > 1 else None
            self.levels.append(Level(encoder, scorer, head_v, head_i, clf, n_envs, norm))

    @property
    def K(self) -> int:
        return len(self.levels)

    def forward(
        self,
        graphs_or_batch,
        rng: np.random.Generator | None = None,
        stochastic: bool = True,
        straight_through: bool = True,
    ) -> Stage1Output:
        """One pass over a batch.

        ``stochastic`` selects Gumbel sampling and batch statistics for the
        classifier input; otherwise edges are thresholded on ``s`` and the
        calibrated statistics are used.
        """
        batch = graphs_or_batch if hasattr(graphs_or_batch, "adjacency") else batch_graphs(graphs_or_batch)
        hc = self.config.hierarchy
        subgraphs = generate_hierarchy(
            batch,
            [lv.encoder for lv in self.levels],
            [lv.scorer for lv in self.levels],
            hc,
            rng=rng,
            stochastic=stochastic,
            straight_through=straight_through,
        )
        pool = batch.pool_matrix()
        labels = batch.labels
        label_sets = build_label_neighborhood(labels)
        prev_h = ad.constant(batch.features)
        prev_sets = None
        results, hier_losses = [], []
        for level, sg in zip(self.levels, subgraphs):
            g_v = mean_pool(level.encoder.nodes(prev_h, sg.variant_adj), pool)
            g_i = mean_pool(level.encoder.nodes(prev_h, sg.invariant_adj), pool)
            z_v = level.head_variant(g_v)
            z_i = level.head_invariant(g_i)
            if level.classifier is not None:
                z_in = level.norm(z_v, batch_stats=stochastic)
                log_post, envs = env_posterior(z_in, labels, level.classifier, self.num_classes)
                l_ed = loss_ed(log_post, hc.diversity_bonus)
            else:
                log_post, envs = None, np.zeros(batch.num_graphs, dtype=np.int64)
                l_ed = ad.Tensor(0.0)
            env_sets = build_env_neighborhood(envs, prev_sets)
            l_env = loss_envcon(z_v, env_sets, hc.tau_contrastive)
            l_lab = loss_labelcon(z_i, label_sets, hc.tau_contrastive)
            l_h = loss_hier(l_ed, l_env, l_lab, hc.alpha, hc.beta)
            results.append(LevelResult(sg, z_v, z_i, log_post, envs, env_sets, l_ed, l_env, l_lab, l_h))
            hier_losses.append(l_h)
            prev_h = sg.nodes
            prev_sets = env_sets
        return Stage1Output(results, label_sets, loss_hei(hier_losses))

    def assign(self, graphs: Sequence[Graph], batch_size: int = 256) -> "EnvAssignment":
        """Deterministic environments at every level (no Gumbel noise)."""
        posts: list[list[np.ndarray]] = [[] for _ in self.levels]
        for start in range(0, len(graphs), batch_size):
            out = self.forward(graphs[start : start + batch_size], stochastic=False, straight_through=False)
            for k, res in enumerate(out.levels):
                posts[k].append(res.posterior)
        posteriors = [np.concatenate(p, axis=0) for p in posts]
        return EnvAssignment([g.id for g in graphs], posteriors)

    def calibrate(self, graphs: Sequence[Graph], batch_size: int = 128) -> None:
        """Set each classifier-input normalization from deterministic ``z_v`` over ``graphs``."""
        zs: list[list[np.ndarray]] = [[] for _ in self.levels]
        for start in range(0, len(graphs), batch_size):
            out = self.forward(graphs[start : start + batch_size], stochastic=False, straight_through=False)
            for k, res in enumerate(out.levels):
                zs[k].append(res.z_variant.data)
        for level, z in zip(self.levels, zs):
            if level.norm is not None:
                level.norm.set_stats(np.concatenate(z, axis=0))

    def eval_loss(self, graphs: Sequence[Graph], batch_size: int) -> float:
        total, count = 0.0, 0
        for start in range(0, len(graphs), batch_size):
            chunk = graphs[start : start + batch_size]
            out = self.forward(chunk, stochastic=False, straight_through=False)
            total += out.total.item() * len(chunk)
            count += len(chunk)
        return total / max(count, 1)


# ---------------------------------------------------------------------------
# assignments


@dataclass
class EnvAssignment:
    ids: list[str]
    posteriors: list[np.ndarray]  # one (n, E_k) array per hierarchy

    @property
    def K(self) -> int:
        return len(self.posteriors)

    def envs(self, k: int | None = None) -> np.ndarray:
        """Hard labels at 1-based hierarchy ``k`` (default: the last)."""
        k = self.K if k is None else k
        return np.argmax(self.posteriors[k - 1], axis=1)

    def records(self, k: int | None = None) -> list[dict]:
        k = self.K if k is None else k
        envs = self.envs(k)
        return [
            {"id": gid, "env": int(e), "posterior": post.tolist(), "hierarchy": k}
            for gid, e, post in zip(self.ids, envs, self.posteriors[k - 1])
        ]


def write_assignments(path: str | Path, assignment: EnvAssignment, all_levels: bool = False) -> None:
    levels = range(1, assignment.K + 1) if all_levels else [assignment.K]
    with Path(path).open("w") as fh:
        for k in levels:
            for rec in assignment.records(k):
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_assignments(path: str | Path) -> dict[str, int]:
    """id -> env for the highest hierarchy present in the file."""
    recs = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    if not recs:
        return {}
    last = max(r["hierarchy"] for r in recs)
    return {r["id"]: int(r["env"]) for r in recs if r["hierarchy"] == last}


def assign_environments(graphs: Sequence[Graph], model: Stage1Model, k: int | None = None) -> EnvAssignment:
    assignment = model.assign(graphs)
    if k is not None and k != assignment.K:
        assignment = EnvAssignment(assignment.ids, assignment.posteriors[:k])
    return assignment


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1


def _dump_state(params: ParamStore, dump_dir: str | Path | None, tag: str) -> str | None:
    if dump_dir is None:
        return None
    path = Path(dump_dir) / f"{tag}_divergence_state.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    params.save(path)
    return str(path)


def train_stage1(
    train: Sequence[Graph],
    val: Sequence[Graph],
    num_classes: int,
    config: Stage1Config,
    streams: RngStreams,
    dump_dir: str | Path | None = None,
) -> tuple[Stage1Model, TrainHistory]:
    """Joint Adam training of all subgraph generators and environment classifiers.

    Early stopping monitors the deterministic validation objective; the
    returned model carries the best validation checkpoint.
    """
    if config.epochs <= 0:
        raise ContractError("stage-1 epochs must be positive")
    model = Stage1Model(train[0].feature_dim, num_classes, config, streams.get("env.init"))
    opt = AdamState(lr=config.lr)
    history = TrainHistory()
    best, best_state, waited = np.inf, model.params.state_dict(), 0
    order_rng, gumbel = streams.get("env.batch"), streams.get("env.gumbel")
    for epoch in range(config.epochs):
        losses = []
        for idx in iterate_minibatches(len(train), config.batch_size, order_rng):
            chunk = [train[i] for i in idx]
            if len(chunk) < 2:
                continue
            try:
                out = model.forward(chunk, rng=gumbel)
                loss = out.total
                if not np.isfinite(loss.item()):
                    raise NumericError("non-finite stage-1 loss")
            except NumericError as exc:
                path = _dump_state(model.params, dump_dir, "stage1")
                raise DivergenceError(f"stage-1 diverged at epoch {epoch}: {exc}", path) from exc
            model.params.zero_grad()
            ad.backward(loss)
            adam_step(model.params, opt)
            losses.append(loss.item())
        history.train_loss.append(float(np.mean(losses)))
        model.calibrate(train)
        val_loss = model.eval_loss(val, config.batch_size) if val else history.train_loss[-1]
        history.val_loss.append(val_loss)
        log.debug("stage1 epoch %d train %.4f val %.4f", epoch, history.train_loss[-1], val_loss)
        if val_loss < best:
            best, best_state, waited = val_loss, model.params.state_dict(), 0
            history.best_epoch = epoch
        else:
            waited += 1
            if waited >= config.patience:
                break
    model.params.load_state_dict(best_state)
    return model, history


def invariant_adjacency_fn(model: Stage1Model):
    """Callable mapping a graph list to its final-hierarchy invariant adjacency."""

    def fn(graphs: Sequence[Graph]) -> np.ndarray:
        out = model.forward(graphs, stochastic=False, straight_through=False)
        return out.levels[-1].subgraph.invariant_adj.data

    return fn
