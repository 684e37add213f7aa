"""Environment-strategy ablations: erm, rand#k, real, infer-flat#k and hier."""
from __future__ import annotations

import csv
import json
import logging
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig
from .data import Dataset
from .envinfer import EnvAssignment, Stage1Model, invariant_adjacency_fn, train_stage1
from .evaluation import (
    DiversityReport,
    accuracy,
    diversity_report,
    env_label_dependency,
    env_recovery_score,
    roc_auc,
)
from .invariant import predict, train_stage2
from .rng import RngStreams

log = logging.getLogger(__name__)

_STRATEGY = re.compile(r"^(erm|real|hier|rand#(\d+)|infer-flat#(\d+))$")
CSV_FIELDS = ["strategy", "seed", "accuracy", "auc", "inter_env_distance", "recovery", "dependency"]


def parse_strategy(name: str) -> tuple[str, int | None]:
    m = _STRATEGY.match(name)
    if m is None:
        raise ValueError(f"unknown strategy {name!r}; expected erm, real, hier, rand#k or infer-flat#k")
    if m.group(2):
        return "rand", int(m.group(2))
    if m.group(3):
        return "infer-flat", int(m.group(3))
    return m.group(1), None


@dataclass
class StrategyRun:
    strategy: str
    seed: int
    accuracy: float
    auc: float
    diversity: DiversityReport
    recovery: float
    dependency: float
    train_envs: np.ndarray = field(repr=False)
    assignment: EnvAssignment | None = field(default=None, repr=False)
    # wall-clock seconds; kept out of the CSV so metric files stay reproducible
    env_seconds: float = field(default=0.0, compare=False)
    total_seconds: float = field(default=0.0, compare=False)

    def row(self) -> dict:
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "accuracy": self.accuracy,
            "auc": self.auc,
            "inter_env_distance": self.diversity.inter_env_distance,
            "recovery": self.recovery,
            "dependency": self.dependency,
        }


@dataclass
class AblationRow:
    strategy: str
    seeds: list[int]
    mean: float
    std: float
    metric: str = "accuracy"


def strategy_environments(
    dataset: Dataset, strategy: str, seed: int, cfg: RunConfig, streams: RngStreams
) -> tuple[np.ndarray, EnvAssignment | None, Stage1Model | None]:
    kind, k = parse_strategy(strategy)
    train = dataset.train
    if kind == "erm":
        return np.zeros(len(train), dtype=np.int64), None, None
    if kind == "rand":
        return streams.get("envs").integers(k, size=len(train)), None, None
    if kind == "real":
        if any(g.true_env is None for g in train):
            raise ValueError("strategy 'real' needs true_env on every training graph")
        return np.array([g.true_env for g in train]), None, None
    num_envs = [k] if kind == "infer-flat" else cfg.num_envs
    model, _ = train_stage1(train, dataset.val, dataset.num_classes, cfg.stage1(num_envs), streams)
    assignment = model.assign(train)
    return assignment.envs(), assignment, model


def run_strategy(dataset: Dataset, strategy: str, seed: int, cfg: RunConfig) -> StrategyRun:
    """Full pipeline for one (strategy, seed); deterministic given both."""
    start = time.perf_counter()
    streams = RngStreams(seed)
    envs, assignment, model = strategy_environments(dataset, strategy, seed, cfg, streams)
    env_seconds = time.perf_counter() - start
    lam = 0.0 if strategy == "erm" else cfg.lam
    inv_adj = invariant_adjacency_fn(model) if model is not None else None
    clf, _ = train_stage2(
        dataset.train, envs, dataset.val, dataset.num_classes, cfg.stage2(lam), streams, invariant_adjacency=inv_adj
    )
    probs = predict(clf, dataset.test)
    labels = np.array([g.label for g in dataset.test])
    acc = accuracy(probs, labels)
    auc = roc_auc(probs[:, 1], labels) if probs.shape[1] == 2 else float("nan")
    return StrategyRun(
        strategy=strategy,
        seed=seed,
        accuracy=acc,
        auc=auc,
        diversity=train_diversity(dataset, envs, strategy),
        recovery=recovery_vs_family(dataset, envs),
        dependency=env_label_dependency(envs, [g.label for g in dataset.train]),
        train_envs=envs,
        assignment=assignment,
        env_seconds=env_seconds,
        total_seconds=time.perf_counter() - start,
    )


def train_diversity(dataset: Dataset, envs: np.ndarray, strategy: str) -> DiversityReport:
    feature = np.array([-1 if g.true_env is None else g.true_env for g in dataset.train])
    return diversity_report(feature, envs, strategy)


def recovery_vs_family(dataset: Dataset, envs: np.ndarray) -> float:
    truth = [g.true_family for g in dataset.train]
    if any(t is None for t in truth) or len(np.unique(envs)) > 8:
        return float("nan")
    return env_recovery_score(envs, np.array(truth))


def run_ablation(
    dataset: Dataset, strategies: Sequence[str], seeds: Sequence[int], cfg: RunConfig
) -> tuple[list[AblationRow], list[StrategyRun]]:
    for s in strategies:
        parse_strategy(s)
    runs = []
    for strategy in strategies:
        for seed in seeds:
            run = run_strategy(dataset, strategy, seed, cfg)
            log.info("%s seed %d: acc %.4f div %.4f", strategy, seed, run.accuracy, run.diversity.inter_env_distance)
            runs.append(run)
    return summarize(runs), runs


def summarize(runs: Sequence[StrategyRun], metric: str = "accuracy") -> list[AblationRow]:
    rows = []
    for strategy in dict.fromkeys(r.strategy for r in runs):
        vals = [getattr(r, metric) for r in runs if r.strategy == strategy]
        seeds = [r.seed for r in runs if r.strategy == strategy]
        std = float(np.std(vals, ddof=1)) if len(vals) >= 2 else 0.0
        rows.append(AblationRow(strategy, seeds, float(np.mean(vals)), std, metric))
    return rows


def mean_by_strategy(runs: Sequence[StrategyRun], attr: str) -> dict[str, float]:
    out: dict[str, list[float]] = {}
    for r in runs:
        value = r.diversity.inter_env_distance if attr == "inter_env_distance" else getattr(r, attr)
        out.setdefault(r.strategy, []).append(value)
    return {k: float(np.mean(v)) for k, v in out.items()}


def write_metrics_csv(path: str | Path, runs: Sequence[StrategyRun]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in runs:
            row = r.row()
            writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})


def write_summary_json(path: str | Path, rows: Sequence[AblationRow], runs: Sequence[StrategyRun]) -> None:
    doc = {
        "rows": [r.__dict__ for r in rows],
        "mean_inter_env_distance": mean_by_strategy(runs, "inter_env_distance"),
        "mean_accuracy": mean_by_strategy(runs, "accuracy"),
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_histograms_csv(path: str | Path, runs: Sequence[StrategyRun]) -> None:
    """Per (strategy, seed, env) counts of the latent feature for offline plotting."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["strategy", "seed", "env", "feature", "count"])
        for r in runs:
            for env, values in r.diversity.features.items():
                feats, counts = np.unique(values, return_counts=True)
                for f, c in zip(feats, counts):
                    writer.writerow([r.strategy, r.seed, env, int(f), int(c)])
