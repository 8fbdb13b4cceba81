"""Run configuration: strict JSON schema with defaults and parse-time validation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .numerics import ConfigError
from .synthdata import KINDS, TaskSpec


def derive_sparsity(beta: float, k_max: int) -> int:
    """Experts a client with compute fraction ``beta`` may activate."""
    if not 0 < beta <= 1:
        raise ConfigError(f"budget beta={beta} must lie in (0, 1]")
    if k_max < 1:
        raise ConfigError("k_max must be at least 1")
    return max(1, math.floor(k_max * beta))


@dataclass
class Dims:
    d: int = 8
    l: int = 8
    layers: int = 2
    experts: int = 8
    rank: int = 2
    alpha: float | None = None  # defaults to rank

    @property
    def lora_alpha(self) -> float:
        return float(self.rank if self.alpha is None else self.alpha)


@dataclass
class PgOptions:
    enabled: bool = True
    clip: float = 2.0


@dataclass
class DmrOptions:
    enabled: bool = True
    phi_upload: str = "keep"


@dataclass
class TaskOptions:
    kind: str = "cluster-regression"
    output_dim: int = 4
    num_clusters: int = 4
    num_samples: int = 512
    noise: float = 0.05
    cluster_sep: float = 3.0
    cluster_std: float = 1.0


@dataclass
class RunConfig:
    seed: int = 42
    rounds: int = 10
    clients: int = 8
    budgets: list = field(default_factory=lambda: [0.125, 0.25])
    k_max: int = 8
    n_p: int = 2
    dims: Dims = field(default_factory=Dims)
    eta: float = 0.05
    gamma: int = 5
    batch_size: int = 16
    zeta: float = 0.9
    eps: float = 1e-6
    lam: float = 0.01
    phi_range: list = field(default_factory=lambda: [-1.0, 1.0])
    pg: PgOptions = field(default_factory=PgOptions)
    dmr: DmrOptions = field(default_factory=DmrOptions)
    participation: float = 1.0
    dirichlet_alpha: float = 0.1
    router_skew: float = 0.0
    task: TaskOptions = field(default_factory=TaskOptions)
    out_dir: str | None = None

    @property
    def phi_min(self) -> float:
        return float(self.phi_range[0])

    @property
    def phi_max(self) -> float:
        return float(self.phi_range[1])

    def client_budgets(self) -> list[float]:
        return [float(self.budgets[c % len(self.budgets)]) for c in range(self.clients)]

    def task_spec(self) -> TaskSpec:
        t = self.task
        return TaskSpec(t.kind, self.dims.d, t.output_dim, t.num_clusters, t.num_samples, t.noise, t.cluster_sep, True, t.cluster_std)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["lambda"] = out.pop("lam")
        return out

    def validate(self) -> "RunConfig":
        dm = self.dims

        def need(cond, name, msg):
            if not cond:
                raise ConfigError(f"{name}: {msg}")

        for name in ("d", "l", "layers", "experts", "rank"):
            need(isinstance(getattr(dm, name), int) and getattr(dm, name) >= 1, f"dims.{name}", "must be a positive integer")
        need(dm.experts >= 2, "dims.experts", "need at least two experts")
        need(dm.rank <= min(dm.d, dm.l), "dims.rank", "must not exceed min(d, l)")
        need(dm.alpha is None or dm.alpha > 0, "dims.alpha", "must be positive")
        need(dm.layers == 1 or dm.d == dm.l, "dims.l", "stacked layers need l == d")
        need(dm.d >= 2, "dims.d", "need room for the constant input feature")
        need(self.rounds >= 0, "rounds", "must be nonnegative")
        need(self.clients >= 1, "clients", "must be at least 1")
        need(len(self.budgets) >= 1, "budgets", "must be non-empty")
        need(1 <= self.k_max <= dm.experts, "k_max", "must lie in [1, experts]")
        need(self.n_p <= dm.experts, "n_p", "must not exceed the number of experts")
        for b in self.budgets:
            k_c = derive_sparsity(b, self.k_max)
            need(k_c <= self.n_p, "n_p", f"budget {b} gives k_c={k_c} > n_p={self.n_p}")
        need(self.eta > 0, "eta", "must be positive")
        need(self.gamma >= 1, "gamma", "must be at least 1")
        need(self.batch_size >= 1, "batch_size", "must be at least 1")
        need(0 <= self.zeta <= 1, "zeta", "must lie in [0, 1]")
        need(self.eps > 0, "eps", "must be positive")
        need(self.lam >= 0, "lambda", "must be nonnegative")
        need(len(self.phi_range) == 2 and self.phi_min < self.phi_max, "phi_range", "must be [min, max] with min < max")
        need(self.pg.clip > 0, "pg.clip", "must be positive")
        need(self.dmr.phi_upload in ("keep", "discard"), "dmr.phi_upload", "must be 'keep' or 'discard'")
        need(0 < self.participation <= 1, "participation", "must lie in (0, 1]")
        need(self.dirichlet_alpha > 0, "dirichlet_alpha", "must be positive")
        need(self.task.kind in KINDS, "task.kind", f"must be one of {KINDS}")
        need(self.task.num_samples >= self.clients, "task.num_samples", "need at least one sample per client")
        need(self.task.num_clusters >= 1 and self.task.output_dim >= 1, "task", "clusters and output_dim must be positive")
        return self


_NESTED = {"dims": Dims, "pg": PgOptions, "dmr": DmrOptions, "task": TaskOptions}


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object")
    names = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        attr = "lam" if cls is RunConfig and key == "lambda" else key
        if attr not in names or (cls is RunConfig and key == "lam"):
            raise ConfigError(f"unknown config key {prefix}{key!r}")
        if cls is RunConfig and attr in _NESTED:
            value = _build(_NESTED[attr], value, f"{attr}.")
        kwargs[attr] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:  # pragma: no cover - guarded by the key check above
        raise ConfigError(str(exc)) from exc


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "").validate()


def parse_config(source: str | Path) -> RunConfig:
    """Parse a JSON file path or inline JSON text into a validated config."""
    text = str(source)
    if not text.lstrip().startswith("{"):
        path = Path(text)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config JSON: {exc}") from exc
    return from_dict(data)


def dumps(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)


def override(cfg: RunConfig, assignments: list[str]) -> RunConfig:
    """Apply ``key=value`` scalar overrides (dotted keys reach nested sections)."""
    data = cfg.to_dict()
    for item in assignments:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.split(".")
        node = data
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"unknown config key {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return from_dict(data)
