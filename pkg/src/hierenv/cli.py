"""Command-line entry point.

Layout of an output directory ``OUT``::

    OUT/data/        manifest.json, train/val/test.jsonl
    OUT/stage1/      params.json, history.json          (hier, infer-flat#k)
    OUT/envs/        assignments.jsonl [, variant_edges.jsonl]
    OUT/stage2/      params.json, history.json, predictions.jsonl
    OUT/eval/        metrics.csv, metrics.json
    OUT/diversity/   diversity.json, histograms.csv
    OUT/ablation/    metrics.csv, summary.json, histograms.csv
    OUT/gradcheck/   gradcheck.json

Every directory also holds ``run_manifest.json`` (command, seed, config
digest, config copy, sha256 of each artifact) and ``config.yaml``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .ablation import (
    StrategyRun,
    parse_strategy,
    recovery_vs_family,
    run_ablation,
    train_diversity,
    write_histograms_csv,
    write_metrics_csv,
    write_summary_json,
)
from .config import ENV_PREFIX, RunConfig, build_config, write_config
from .data import Dataset, batch_graphs, generate_split, generate_synthetic, load_dataset, write_dataset
from .envinfer import (
    EnvAssignment,
    Stage1Model,
    invariant_adjacency_fn,
    read_assignments,
    train_stage1,
    write_assignments,
)
from .errors import DependencyError, DivergenceError, HierEnvError
from .evaluation import accuracy, env_label_dependency, roc_auc
from .invariant import InvariantClassifier, invariant_loss, predict, train_stage2, write_predictions
from .params import finite_difference_check, finite_difference_report
from .rng import RngStreams

log = logging.getLogger("hierenv")

GRADCHECK_TOL = 1e-4
RUN_MANIFEST = "run_manifest.json"


# ---------------------------------------------------------------------------
# artifact plumbing


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_manifest(directory: Path, command: str, cfg: RunConfig, artifacts: Sequence[str | Path]) -> Path:
    write_config(directory / "config.yaml", cfg)
    files = sorted({Path(a).name for a in artifacts} | {"config.yaml"})
    doc = {
        "command": command,
        "seed": cfg.seed,
        "strategy": cfg.strategy,
        "config_digest": cfg.digest(),
        "config": cfg.to_dict(),
        "artifacts": {name: sha256_file(directory / name) for name in files},
    }
    path = directory / RUN_MANIFEST
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _dir(cfg: RunConfig, name: str) -> Path:
    path = Path(cfg.out) / name
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require(path: Path) -> Path:
    if not path.exists():
        raise DependencyError(str(path))
    return path


def _dataset(cfg: RunConfig) -> Dataset:
    return load_dataset(_require(cfg.manifest_path()))


def _stage1_envs(cfg: RunConfig) -> list[int] | None:
    """Environment counts for strategies that train stage 1; None otherwise."""
    kind, k = parse_strategy(cfg.strategy)
    if kind == "hier":
        return list(cfg.num_envs)
    if kind == "infer-flat":
        return [k]
    return None


def _load_stage1(cfg: RunConfig, dataset: Dataset) -> Stage1Model:
    path = _require(Path(cfg.out) / "stage1" / "params.json")
    model = Stage1Model(
        dataset.feature_dim, dataset.num_classes, cfg.stage1(_stage1_envs(cfg)), np.random.default_rng(0)
    )
    model.params.load(path)
    return model


def _load_stage2(cfg: RunConfig, dataset: Dataset) -> InvariantClassifier:
    path = _require(Path(cfg.out) / "stage2" / "params.json")
    clf = InvariantClassifier(dataset.feature_dim, dataset.num_classes, cfg.stage2(), np.random.default_rng(0))
    clf.params.load(path)
    return clf


def _train_envs(cfg: RunConfig, dataset: Dataset) -> np.ndarray:
    path = _require(Path(cfg.out) / "envs" / "assignments.jsonl")
    by_id = read_assignments(path)
    missing = [g.id for g in dataset.train if g.id not in by_id]
    if missing:
        raise DependencyError(f"{path} (no assignment for graph {missing[0]})")
    return np.array([by_id[g.id] for g in dataset.train], dtype=np.int64)


def _stage2_lam(cfg: RunConfig) -> float:
    return 0.0 if cfg.strategy == "erm" else cfg.lam


# ---------------------------------------------------------------------------
# commands


def cmd_generate_data(cfg: RunConfig) -> Path:
    out = _dir(cfg, "data")
    train, val, test = generate_synthetic(cfg.synthetic())
    manifest = write_dataset(out, train, val, test)
    write_run_manifest(out, "generate-data", cfg, ["manifest.json", "train.jsonl", "val.jsonl", "test.jsonl"])
    log.info("wrote %d/%d/%d graphs to %s", len(train), len(val), len(test), out)
    return manifest


def cmd_train_env(cfg: RunConfig) -> Path:
    dataset = _dataset(cfg)
    out = _dir(cfg, "stage1")
    num_envs = _stage1_envs(cfg)
    if num_envs is None:
        log.info("strategy %s does not train stage 1", cfg.strategy)
        write_run_manifest(out, "train-env", cfg, [])
        return out
    streams = RngStreams(cfg.seed)
    model, history = train_stage1(
        dataset.train, dataset.val, dataset.num_classes, cfg.stage1(num_envs), streams, dump_dir=out
    )
    model.params.save(out / "params.json")
    (out / "history.json").write_text(json.dumps(history.__dict__, sort_keys=True) + "\n")
    write_run_manifest(out, "train-env", cfg, ["params.json", "history.json"])
    return out / "params.json"


def variant_edge_records(model: Stage1Model, graphs, batch_size: int = 256) -> list[dict]:
    """Per graph and level, the variant-subgraph edges in local node indices."""
    recs = []
    for start in range(0, len(graphs), batch_size):
        batch = batch_graphs(graphs[start : start + batch_size])
        out = model.forward(batch, stochastic=False, straight_through=False)
        for level in out.levels:
            sg = level.subgraph
            for b, g in enumerate(batch.graphs):
                lo, hi = batch.offsets[b], batch.offsets[b + 1]
                sel = (batch.edge_rows >= lo) & (batch.edge_rows < hi) & (sg.edge_mask > 0)
                edges = [[int(i - lo), int(j - lo)] for i, j in zip(batch.edge_rows[sel], batch.edge_cols[sel])]
                recs.append({"id": g.id, "k": sg.k, "variant_edges": edges})
    return recs


def cmd_assign_env(cfg: RunConfig, dump_variant_edges: bool = False) -> Path:
    dataset = _dataset(cfg)
    out = _dir(cfg, "envs")
    train = dataset.train
    kind, k = parse_strategy(cfg.strategy)
    artifacts = ["assignments.jsonl"]
    if kind in ("hier", "infer-flat"):
        model = _load_stage1(cfg, dataset)
        assignment = model.assign(train)
        if dump_variant_edges:
            with (out / "variant_edges.jsonl").open("w") as fh:
                for rec in variant_edge_records(model, train):
                    fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
            artifacts.append("variant_edges.jsonl")
    else:
        if kind == "erm":
            envs, n_envs = np.zeros(len(train), dtype=np.int64), 1
        elif kind == "rand":
            envs, n_envs = RngStreams(cfg.seed).get("envs").integers(k, size=len(train)), k
        else:
            if any(g.true_env is None for g in train):
                raise HierEnvError("strategy 'real' needs true_env on every training graph")
            envs = np.array([g.true_env for g in train])
            n_envs = int(envs.max()) + 1
        assignment = EnvAssignment([g.id for g in train], [np.eye(n_envs)[envs]])
    write_assignments(out / "assignments.jsonl", assignment, all_levels=True)
    write_run_manifest(out, "assign-env", cfg, artifacts)
    return out / "assignments.jsonl"


def cmd_train_inv(cfg: RunConfig) -> Path:
    dataset = _dataset(cfg)
    envs = _train_envs(cfg, dataset)
    out = _dir(cfg, "stage2")
    inv_adj = None
    if cfg.use_invariant_adjacency and _stage1_envs(cfg) is not None:
        inv_adj = invariant_adjacency_fn(_load_stage1(cfg, dataset))
    streams = RngStreams(cfg.seed)
    clf, history = train_stage2(
        dataset.train,
        envs,
        dataset.val,
        dataset.num_classes,
        cfg.stage2(_stage2_lam(cfg)),
        streams,
        invariant_adjacency=inv_adj,
        dump_dir=out,
    )
    clf.params.save(out / "params.json")
    (out / "history.json").write_text(json.dumps(history.__dict__, sort_keys=True) + "\n")
    write_predictions(out / "predictions.jsonl", dataset.test, predict(clf, dataset.test))
    write_run_manifest(out, "train-inv", cfg, ["params.json", "history.json", "predictions.jsonl"])
    return out / "params.json"


def cmd_evaluate(cfg: RunConfig) -> Path:
    dataset = _dataset(cfg)
    clf = _load_stage2(cfg, dataset)
    envs = _train_envs(cfg, dataset)
    probs = predict(clf, dataset.test)
    labels = np.array([g.label for g in dataset.test])
    run = StrategyRun(
        strategy=cfg.strategy,
        seed=cfg.seed,
        accuracy=accuracy(probs, labels),
        auc=roc_auc(probs[:, 1], labels) if probs.shape[1] == 2 else float("nan"),
        diversity=train_diversity(dataset, envs, cfg.strategy),
        recovery=recovery_vs_family(dataset, envs),
        dependency=env_label_dependency(envs, [g.label for g in dataset.train]),
        train_envs=envs,
    )
    out = _dir(cfg, "eval")
    write_metrics_csv(out / "metrics.csv", [run])
    (out / "metrics.json").write_text(json.dumps(run.row(), indent=2, sort_keys=True) + "\n")
    write_run_manifest(out, "evaluate", cfg, ["metrics.csv", "metrics.json"])
    return out / "metrics.csv"


def cmd_diversity(cfg: RunConfig) -> Path:
    dataset = _dataset(cfg)
    envs = _train_envs(cfg, dataset)
    report = train_diversity(dataset, envs, cfg.strategy)
    out = _dir(cfg, "diversity")
    (out / "diversity.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    run = StrategyRun(cfg.strategy, cfg.seed, float("nan"), float("nan"), report, float("nan"), float("nan"), envs)
    write_histograms_csv(out / "histograms.csv", [run])
    write_run_manifest(out, "diversity", cfg, ["diversity.json", "histograms.csv"])
    return out / "diversity.json"


def cmd_pipeline(cfg: RunConfig, dump_variant_edges: bool = False) -> Path:
    if not cfg.manifest_path().exists():
        if cfg.data is not None:
            raise DependencyError(str(cfg.manifest_path()))
        cmd_generate_data(cfg)
    cmd_train_env(cfg)
    cmd_assign_env(cfg, dump_variant_edges)
    cmd_train_inv(cfg)
    metrics = cmd_evaluate(cfg)
    cmd_diversity(cfg)
    summary = {
        "metrics": json.loads((Path(cfg.out) / "eval" / "metrics.json").read_text()),
        "diversity": json.loads((Path(cfg.out) / "diversity" / "diversity.json").read_text()),
    }
    (Path(cfg.out) / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_run_manifest(Path(cfg.out), "pipeline", cfg, ["summary.json"])
    return metrics


def cmd_ablation(cfg: RunConfig) -> Path:
    if not cfg.manifest_path().exists() and cfg.data is None:
        cmd_generate_data(cfg)
    dataset = _dataset(cfg)
    rows, runs = run_ablation(dataset, cfg.strategies, cfg.seeds, cfg)
    out = _dir(cfg, "ablation")
    write_metrics_csv(out / "metrics.csv", runs)
    write_summary_json(out / "summary.json", rows, runs)
    write_histograms_csv(out / "histograms.csv", runs)
    write_run_manifest(out, "ablation", cfg, ["metrics.csv", "summary.json", "histograms.csv"])
    for r in rows:
        print(f"{r.strategy:<14} acc {100 * r.mean:6.2f} +- {100 * r.std:5.2f} over seeds {r.seeds}")
    return out / "metrics.csv"


def gradient_report(cfg: RunConfig, num_graphs: int = 4, max_coords: int = 16) -> dict[str, dict[str, float]]:
    """Finite-difference errors for every stage-1 loss term and the stage-2 objective.

    The Gumbel and dropout streams are replayed for each evaluation.  The
    straight-through carrier is switched off: its forward value is piecewise
    constant in the scorer, so only the plain path has a true derivative.
    """
    graphs = generate_split("gradcheck", num_graphs, cfg.rho_train, cfg.label_flip_prob, cfg.seed)
    batch = batch_graphs(graphs)
    num_classes = 2
    streams = RngStreams(cfg.seed)
    model = Stage1Model(graphs[0].feature_dim, num_classes, cfg.stage1(), streams.get("env.init"))

    def stage1_terms() -> dict[str, ad.Tensor]:
        out = model.forward(batch, rng=streams.get("env.gumbel"), straight_through=False)
        terms = {}
        for res, k in zip(out.levels, range(1, model.K + 1)):
            terms[f"L_ED[{k}]"] = res.l_ed
            terms[f"L_EnvCon[{k}]"] = res.l_envcon
            terms[f"L_LabelCon[{k}]"] = res.l_labelcon
            terms[f"L_hier[{k}]"] = res.l_hier
        terms["L_HEI"] = out.total
        return terms

    report = finite_difference_report(stage1_terms, model.params, eps=1e-5, streams=streams, max_coords=max_coords)

    # unit penalty weight so the IRM term is not swamped by cross-entropy
    clf = InvariantClassifier(graphs[0].feature_dim, num_classes, cfg.stage2(1.0), streams.get("inv.init"))
    envs = np.arange(num_graphs) % 2

    def l_inv() -> ad.Tensor:
        logits = clf.logits(batch, rng=streams.get("inv.dropout"), training=True)
        return invariant_loss(logits, batch.labels, envs, 1.0)

    report["L_inv"] = finite_difference_check(l_inv, clf.params, eps=1e-5, streams=streams, max_coords=max_coords)
    return report


def cmd_gradcheck(cfg: RunConfig) -> tuple[Path, float]:
    report = gradient_report(cfg)
    worst = float(max(max(v.values()) for v in report.values()))
    out = _dir(cfg, "gradcheck")
    doc = {"tolerance": GRADCHECK_TOL, "max_relative_error": worst, "passed": worst < GRADCHECK_TOL, "losses": report}
    (out / "gradcheck.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    write_run_manifest(out, "gradcheck", cfg, ["gradcheck.json"])
    for name, errs in report.items():
        print(f"{name:<16} max rel err {max(errs.values()):.3e}")
    return out / "gradcheck.json", worst


# ---------------------------------------------------------------------------
# argument parsing


def _parse_set(items: Sequence[str] | None) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise argparse.ArgumentTypeError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat YAML file of RunConfig keys")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--data", help="dataset manifest.json (default OUT/data/manifest.json)")
    common.add_argument("--strategy", help="erm, real, hier, rand#k or infer-flat#k")
    common.add_argument("--seeds", help="seed list, e.g. 1..5 or 1,3,5")
    common.add_argument("--strategies", help="comma-separated strategy list for ablation")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(
        prog="hierenv",
        description="Hierarchical environment inference and invariant graph classification.",
        epilog=f"Config precedence: flags > {ENV_PREFIX}<KEY> environment variables > --config file > defaults.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("generate-data", "write the synthetic motif benchmark"),
        ("train-env", "train the stage-1 environment inference model"),
        ("assign-env", "write per-graph environment assignments"),
        ("train-inv", "train the stage-2 invariant classifier"),
        ("evaluate", "test-set metrics"),
        ("diversity", "K-S diversity of the inferred environments"),
        ("pipeline", "generate (if needed), train-env, assign-env, train-inv, evaluate, diversity"),
        ("ablation", "run every strategy over every seed"),
        ("gradcheck", "finite-difference gradient check; nonzero exit above 1e-4"),
    ]:
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name in ("assign-env", "pipeline"):
            p.add_argument("--dump-variant-edges", action="store_true", help="also write variant_edges.jsonl")
    return parser


def config_from_args(args: argparse.Namespace, environ=None) -> RunConfig:
    flags = _parse_set(args.set)
    for key in ("seed", "out", "data", "strategy", "seeds", "strategies"):
        value = getattr(args, key)
        if value is not None:
            flags[key] = value
    return build_config(args.config, flags, environ)


def _error_record(command: str | None, exc: BaseException) -> dict:
    rec = {"status": "error", "command": command, "error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, DependencyError):
        rec["missing"] = exc.missing
    if isinstance(exc, DivergenceError):
        rec["dump_path"] = exc.dump_path
    return rec


EXIT_GRADCHECK = 1
EXIT_ERROR = 2
EXIT_DEPENDENCY = 3


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        dump = getattr(args, "dump_variant_edges", False)
        if args.command == "gradcheck":
            _, worst = cmd_gradcheck(cfg)
            if worst >= GRADCHECK_TOL:
                print(json.dumps({"status": "failed", "command": "gradcheck", "max_relative_error": worst}), file=sys.stderr)
                return EXIT_GRADCHECK
            return 0
        commands = {
            "generate-data": lambda: cmd_generate_data(cfg),
            "train-env": lambda: cmd_train_env(cfg),
            "assign-env": lambda: cmd_assign_env(cfg, dump),
            "train-inv": lambda: cmd_train_inv(cfg),
            "evaluate": lambda: cmd_evaluate(cfg),
            "diversity": lambda: cmd_diversity(cfg),
            "pipeline": lambda: cmd_pipeline(cfg, dump),
            "ablation": lambda: cmd_ablation(cfg),
        }
        result = commands[args.command]()
        print(json.dumps({"status": "ok", "command": args.command, "artifact": str(result)}))
        return 0
    except DependencyError as exc:
        print(json.dumps(_error_record(args.command, exc)), file=sys.stderr)
        return EXIT_DEPENDENCY
    except (HierEnvError, ValueError, OSError) as exc:
        print(json.dumps(_error_record(args.command, exc)), file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
