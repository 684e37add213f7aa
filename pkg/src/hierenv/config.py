"""Run configuration: defaults < YAML file < HIERENV_* environment variables < command-line flags."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .data import SyntheticConfig
from .envinfer import Stage1Config
from .errors import ContractError, ParseError
from .invariant import Stage2Config
from .subgraph import HierarchyConfig

ENV_PREFIX = "HIERENV_"


@dataclass
class RunConfig:
    seed: int = 1
    data: str | None = None  # dataset manifest path; None -> <out>/data/manifest.json
    out: str = "runs/default"
    # synthetic benchmark
    n_train: int = 1000
    n_val: int = 200
    n_test: int = 500
    rho_train: float = 0.9
    rho_test: float = 0.1
    label_flip_prob: float = 0.05
    # hierarchy
    K: int = 3
    num_envs: list[int] = field(default_factory=lambda: [8, 4, 2])
    threshold: float = 0.6
    tau_gumbel: float = 0.05
    tau_contrastive: float = 0.5
    alpha: float = 1.0
    beta: float = 1.0
    lam: float = 0.01
    diversity_bonus: float = 5.0  # entropy bonus on the mean posterior; 0 gives the bare L_ED
    # encoders
    hidden: int = 32
    proj_dim: int = 16
    layers_stage1: int = 1
    layers_stage2: int = 3
    use_invariant_adjacency: bool = False
    # optimization
    lr: float = 1e-3
    batch_size: int = 32
    epochs_stage1: int = 100
    epochs_stage2: int = 100
    patience: int = 20
    dropout: float = 0.5
    # ablation
    strategy: str = "hier"
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    strategies: list[str] = field(default_factory=lambda: ["erm", "rand#2", "infer-flat#2", "hier"])

    def validate(self) -> None:
        if len(self.num_envs) != self.K:
            raise ContractError(f"num_envs has {len(self.num_envs)} entries but K = {self.K}")
        self.hierarchy().validate()
        self.synthetic().validate()
        for name in ("hidden", "proj_dim", "layers_stage1", "layers_stage2", "batch_size", "patience"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.epochs_stage1 < 1 or self.epochs_stage2 < 1:
            raise ContractError("epoch counts must be >= 1")
        if self.lr <= 0:
            raise ContractError("lr must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("dropout must lie in [0, 1)")
        if self.data is not None and not Path(self.data).exists():
            raise ContractError(f"dataset manifest {self.data} does not exist")

    def hierarchy(self, num_envs: list[int] | None = None) -> HierarchyConfig:
        return HierarchyConfig(
            num_envs=list(self.num_envs if num_envs is None else num_envs),
            threshold=self.threshold,
            tau_gumbel=self.tau_gumbel,
            tau_contrastive=self.tau_contrastive,
            alpha=self.alpha,
            beta=self.beta,
            lam=self.lam,
            diversity_bonus=self.diversity_bonus,
        )

    def synthetic(self) -> SyntheticConfig:
        return SyntheticConfig(
            n_train=self.n_train,
            n_val=self.n_val,
            n_test=self.n_test,
            rho_train=self.rho_train,
            rho_test=self.rho_test,
            label_flip_prob=self.label_flip_prob,
            seed=self.seed,
        )

    def stage1(self, num_envs: list[int] | None = None) -> Stage1Config:
        return Stage1Config(
            hierarchy=self.hierarchy(num_envs),
            hidden=self.hidden,
            proj_dim=self.proj_dim,
            num_layers=self.layers_stage1,
            lr=self.lr,
            batch_size=self.batch_size,
            epochs=self.epochs_stage1,
            patience=self.patience,
        )

    def stage2(self, lam: float | None = None) -> Stage2Config:
        return Stage2Config(
            hidden=self.hidden,
            num_layers=self.layers_stage2,
            dropout=self.dropout,
            lam=self.lam if lam is None else lam,
            lr=self.lr,
            batch_size=self.batch_size,
            epochs=self.epochs_stage2,
            patience=self.patience,
            use_invariant_adjacency=self.use_invariant_adjacency,
        )

    def manifest_path(self) -> Path:
        return Path(self.data) if self.data else Path(self.out) / "data" / "manifest.json"

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Hash of every field except the output directory."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def replace(self, **changes) -> "RunConfig":
        cfg = dataclasses.replace(self, **changes)
        if "num_envs" in changes and "K" not in changes:
            cfg.K = len(cfg.num_envs)
        return cfg


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, value: Any) -> Any:
    """Convert YAML/env/flag values to the field's declared type."""
    if name not in _FIELDS:
        raise ContractError(f"unknown config key {name!r}")
    default = _FIELDS[name].default
    if default is dataclasses.MISSING:
        default = _FIELDS[name].default_factory()
    if isinstance(value, str) and not isinstance(default, str) and default is not None:
        value = _parse_text(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ContractError(f"{name} expects a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ContractError(f"{name} expects an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ContractError(f"{name} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if isinstance(value, (int, str)):
            value = [value]
        if not isinstance(value, list):
            raise ContractError(f"{name} expects a list, got {value!r}")
        kind = type(default[0]) if default else str
        return [kind(v) for v in value]
    return None if value is None else str(value)


def _parse_text(text: str) -> Any:
    text = text.strip()
    if ".." in text and "," not in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    if "," in text and not text.startswith("["):
        return [yaml.safe_load(part) for part in text.split(",") if part.strip()]
    return yaml.safe_load(text)


def read_config_file(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ParseError(f"invalid config: {exc}", path=str(path)) from exc
    if not isinstance(doc, dict):
        raise ParseError("config must be a flat key/value mapping", path=str(path))
    for key, value in doc.items():
        if isinstance(value, dict):
            raise ParseError(f"config key {key!r} must not be nested", path=str(path))
    return doc


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, Any]:
    environ = os.environ if environ is None else environ
    out = {}
    for key, value in environ.items():
        if key.startswith(ENV_PREFIX):
            name = key[len(ENV_PREFIX):].lower()
            if name == "k":
                name = "K"
            if name in _FIELDS:
                out[name] = value
    return out


def build_config(
    path: str | Path | None = None,
    flags: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
) -> RunConfig:
    values: dict[str, Any] = {}
    if path is not None:
        values.update(read_config_file(path))
    values.update(env_overrides(environ))
    values.update({k: v for k, v in (flags or {}).items() if v is not None})
    coerced = {k: _coerce(k, v) for k, v in values.items()}
    if "num_envs" in coerced and "K" not in coerced:
        coerced["K"] = len(coerced["num_envs"])
    cfg = RunConfig(**coerced)
    cfg.validate()
    return cfg


def write_config(path: str | Path, cfg: RunConfig) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
