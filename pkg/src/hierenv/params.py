"""Parameter storage, initialization, Adam, checkpoints and the finite-difference oracle."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .autodiff import Tensor, backward
from .errors import ContractError, GradCheckError, ParseError
from .rng import RngStreams


class ParamStore:
    """Ordered name -> Tensor map; iteration follows insertion order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, values) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter id {name!r}")
        t = Tensor(values, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def uniform(self, name: str, shape: tuple[int, int], rng: np.random.Generator) -> Tensor:
        """Weight matrix drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        bound = 1.0 / math.sqrt(shape[0])
        return self.add(name, rng.uniform(-bound, bound, size=shape))

    def zeros(self, name: str, shape) -> Tensor:
        return self.add(name, np.zeros(shape))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def subset(self, prefix: str) -> "ParamStore":
        """A view sharing the tensors whose id starts with ``prefix``."""
        out = ParamStore()
        for name, t in self._params.items():
            if name.startswith(prefix):
                out._params[name] = t
        return out

    def merge(self, other: "ParamStore") -> "ParamStore":
        out = ParamStore()
        for store in (self, other):
            for name, t in store.items():
                if name in out._params:
                    raise ContractError(f"duplicate parameter id {name!r}")
                out._params[name] = t
        return out

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def num_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        if missing:
            raise ContractError(f"checkpoint lacks parameters: {sorted(missing)}")
        for name, t in self._params.items():
            values = np.asarray(state[name], dtype=np.float64)
            if values.shape != t.shape:
                raise ContractError(f"shape mismatch for {name}: {values.shape} vs {t.shape}")
            t.data = values.copy()

    def save(self, path: str | Path) -> None:
        """JSON list of {name, shape, values}; float repr round-trips bit-exactly."""
        payload = [
            {"name": name, "shape": list(t.shape), "values": t.data.reshape(-1).tolist()}
            for name, t in self._params.items()
        ]
        Path(path).write_text(json.dumps({"format": "hierenv-params-v1", "params": payload}))

    @staticmethod
    def read(path: str | Path) -> dict[str, np.ndarray]:
        try:
            doc = json.loads(Path(path).read_text())
            return {
                entry["name"]: np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
                for entry in doc["params"]
            }
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad checkpoint: {exc}", path=str(path)) from exc

    def load(self, path: str | Path) -> None:
        self.load_state_dict(self.read(path))


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamStore, state: AdamState) -> None:
    """Bias-corrected Adam update in place; clears gradients afterwards."""
    if state.lr <= 0:
        raise ContractError("Adam learning rate must be positive")
    for name, t in params.items():
        if t.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in params.items():
        g = t.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.data = t.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        t.grad = None


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: ParamStore,
    eps: float = 1e-5,
    streams: RngStreams | None = None,
    max_coords: int | None = 64,
    seed: int = 0,
) -> dict[str, float]:
    """Compare backprop gradients with central differences.

    Returns, per parameter, the max over sampled coordinates of
    ``|analytic - numeric| / max(1, |numeric|)``.  When ``streams`` is
    given its state is replayed before every evaluation so stochastic ops
    see identical noise.  A loss that is not reproducible at the base point
    raises :class:`GradCheckError`.
    """
    report = finite_difference_report(lambda: {"loss": loss_fn()}, params, eps, streams, max_coords, seed)
    return report["loss"]


def finite_difference_report(
    losses_fn: Callable[[], dict[str, Tensor]],
    params: ParamStore,
    eps: float = 1e-5,
    streams: RngStreams | None = None,
    max_coords: int | None = 64,
    seed: int = 0,
) -> dict[str, dict[str, float]]:
    """Like :func:`finite_difference_check` for several scalar terms of one forward pass.

    Each perturbed forward is shared by every term, so checking many
    components of a composite objective costs one sweep.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    snap = streams.snapshot() if streams is not None else None

    def forward() -> dict[str, Tensor]:
        if snap is not None:
            streams.restore(snap)
        return losses_fn()

    def values() -> dict[str, float]:
        return {k: v.item() for k, v in forward().items()}

    base = values()
    analytic: dict[str, dict[str, np.ndarray]] = {}
    for term in base:
        loss = forward()[term]
        params.zero_grad()
        backward(loss)
        analytic[term] = {name: t.grad.copy() for name, t in params.items()}
    if values() != base:
        raise GradCheckError("loss is not deterministic under the given RNG streams")

    pick = np.random.default_rng(seed)
    report = {term: {} for term in base}
    for name, t in params.items():
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(pick.choice(flat.size, size=max_coords, replace=False))
        worst = dict.fromkeys(base, 0.0)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            up = values()
            flat[c] = orig - eps
            down = values()
            flat[c] = orig
            for term in base:
                numeric = (up[term] - down[term]) / (2 * eps)
                err = abs(analytic[term][name].reshape(-1)[c] - numeric) / max(1.0, abs(numeric))
                worst[term] = max(worst[term], err)
        for term in base:
            report[term][name] = worst[term]
    if snap is not None:
        streams.restore(snap)
    params.zero_grad()
    return report
