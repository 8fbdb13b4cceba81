"""Federated rounds: local SGD with pseudo-gradient injection, FedAvg,
pseudo-gradient buffers, global utilization and modulation updates."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as mx
from .config import RunConfig, derive_sparsity
from .costmodel import ModelDims, client_cost_ubsmoe
from .model import SmoeModel, batch_loss_and_grads, init_model, predict_loss, sgd_step
from .numerics import ConfigError, make_rng
from .smoe import Expert, ExpertAdapter, LayerGradients, SmoeLayerParams
from .synthdata import generate_task, partition_dirichlet

log = logging.getLogger(__name__)

__all__ = [
    "ClientProfile",
    "FedHyper",
    "PgBuffer",
    "ServerState",
    "UtilizationStats",
    "aggregate_fedavg",
    "client_local_train",
    "compute_pg_buffer",
    "derive_sparsity",
    "pg_inject",
    "run_federated",
    "update_global_utilization",
    "update_modulation",
]


class NumericalError(RuntimeError):
    pass


@dataclass
class ClientProfile:
    id: int
    beta: float
    k_c: int
    p_c: float
    rho_c: float
    x: np.ndarray
    y: np.ndarray


def make_profiles(budgets, k_max: int, shards) -> list[ClientProfile]:
    """Client profiles with ``p_c`` from shard sizes and ``rho_c = sqrt(k_bar / k_c)``."""
    sizes = np.array([len(x) for x, _ in shards], dtype=np.float64)
    weights = sizes / sizes.sum()
    ks = [derive_sparsity(b, k_max) for b in budgets]
    k_bar = float(np.dot(weights, ks))
    return [
        ClientProfile(c, float(b), k, float(w), math.sqrt(k_bar / k), x, y)
        for c, (b, k, w, (x, y)) in enumerate(zip(budgets, ks, weights, shards))
    ]


@dataclass
class FedHyper:
    eta: float = 0.05
    gamma: int = 5
    batch_size: int = 16
    zeta: float = 0.9
    eps: float = 1e-6
    u_star: float = 0.25
    phi_min: float = -1.0
    phi_max: float = 1.0
    lam: float = 0.01
    n_p: int = 2
    pg_enabled: bool = True
    pg_clip: float = 2.0
    dmr_enabled: bool = True
    phi_upload: str = "keep"


@dataclass
class PgBuffer:
    """Per-layer, per-expert pseudo-gradients for the adapter factors."""

    b: list[list[np.ndarray]]
    a: list[list[np.ndarray]]
    clip_threshold: float = 2.0

    @classmethod
    def zeros(cls, model: SmoeModel, clip: float = 2.0) -> "PgBuffer":
        return cls(
            [[np.zeros_like(e.adapter.b) for e in p.experts] for p in model.layers],
            [[np.zeros_like(e.adapter.a) for e in p.experts] for p in model.layers],
            clip,
        )


@dataclass
class UtilizationStats:
    counts: np.ndarray  # L x M activation counts
    tokens: np.ndarray  # L token counts
    k_c: int
    max_gate_error: float = 0.0  # max |sum(gamma) - 1| seen while training


@dataclass
class ServerState:
    model: SmoeModel
    pg: PgBuffer
    global_util: np.ndarray  # L x M
    round: int
    k_bar: float
    hyper: FedHyper

    @property
    def u_star(self) -> float:
        return self.k_bar / self.model.layers[0].num_experts


def pg_inject(real: LayerGradients, activated: np.ndarray, pg_b, pg_a, rho_c: float) -> LayerGradients:
    """Replace the adapter gradients of non-activated experts by ``rho_c`` times the buffer."""
    activated = np.asarray(activated, dtype=bool)
    if activated.shape != (len(real.b),) or len(pg_b) != len(real.b) or len(pg_a) != len(real.a):
        raise ConfigError("activation flags or buffer do not match the layer")
    out = LayerGradients(list(real.b), list(real.a), real.router, real.phi, real.x, real.pseudo.copy())
    for i in np.flatnonzero(~activated):
        if pg_b[i].shape != real.b[i].shape or pg_a[i].shape != real.a[i].shape:
            raise ConfigError(f"pseudo-gradient shape mismatch for expert {i}")
        out.b[i] = rho_c * pg_b[i]
        out.a[i] = rho_c * pg_a[i]
        out.pseudo[i] = True
    return out


def sample_batch(rng: np.random.Generator, n: int, batch_size: int) -> np.ndarray:
    if batch_size >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=batch_size, replace=False))


def client_local_train(
    profile: ClientProfile,
    start: SmoeModel,
    pg: PgBuffer | None,
    hyper: FedHyper,
    rng: np.random.Generator,
):
    """``gamma`` SGD steps from ``start``; returns ``(model, stats, loss_trace)``.

    ``pg=None`` disables pseudo-gradient injection.  With DMR disabled the
    modulation vector is left untouched (and is expected to be zero).
    """
    if hyper.gamma < 1:
        raise ConfigError("need at least one local iteration")
    if len(profile.x) == 0:
        raise ConfigError(f"client {profile.id} has an empty shard")
    model = start.copy()
    L, M = len(model.layers), model.layers[0].num_experts
    counts = np.zeros((L, M), dtype=np.int64)
    tokens = np.zeros(L, dtype=np.int64)
    trace = []
    gate_err = 0.0
    for _ in range(hyper.gamma):
        idx = sample_batch(rng, len(profile.x), hyper.batch_size)
        res = batch_loss_and_grads(
            model, profile.x[idx], profile.y[idx], profile.k_c, hyper.n_p,
            hyper.phi_min, hyper.phi_max, hyper.lam if hyper.dmr_enabled else 0.0,
        )
        if not np.isfinite(res.loss):
            raise NumericalError(f"client {profile.id}: non-finite loss")
        counts += res.counts
        tokens += len(idx)
        for per_token in res.decisions:
            for dec in per_token:
                gate_err = max(gate_err, abs(float(dec.gate_weights[dec.activation_set].sum()) - 1.0))
        trace.append(res.loss)
        grads = res.grads
        if pg is not None:
            for j in range(L):
                grads.layers[j] = pg_inject(grads.layers[j], res.counts[j] > 0, pg.b[j], pg.a[j], profile.rho_c)
        sgd_step(model, grads, hyper.eta, train_phi=hyper.dmr_enabled)
    return model, UtilizationStats(counts, tokens, profile.k_c, gate_err), trace


def _check_weights(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if abs(w.sum() - 1.0) > 1e-12:
        raise ConfigError(f"aggregation weights sum to {w.sum()!r}, not 1")
    return w


def aggregate_fedavg(models: list[SmoeModel], weights, include_phi: bool = True) -> SmoeModel:
    """Weighted average of all trainable tensors; frozen ``w0`` is shared, not averaged.

    With ``include_phi=False`` the first model's phi is carried over unchanged.
    """
    w = _check_weights(weights)
    if len(models) != len(w) or not models:
        raise ConfigError("need one weight per model")
    if len(models) == 1:
        return models[0].copy()
    ref = models[0]

    def avg(get):
        return sum(wi * get(m) for wi, m in zip(w, models))

    layers = []
    for j, p in enumerate(ref.layers):
        experts = []
        for i, e in enumerate(p.experts):
            b = avg(lambda m: m.layers[j].experts[i].adapter.b)
            a = avg(lambda m: m.layers[j].experts[i].adapter.a)
            experts.append(Expert(e.w0, ExpertAdapter(b, a, e.adapter.alpha)))
        router = avg(lambda m: m.layers[j].router_w)
        phi = avg(lambda m: m.layers[j].phi) if include_phi else p.phi.copy()
        layers.append(SmoeLayerParams(experts, router, phi, p.layer_index))
    return SmoeModel(layers, avg(lambda m: m.head), ref.kind)


def _clip(t: np.ndarray, threshold: float) -> np.ndarray:
    norm = float(np.linalg.norm(t))
    return t * (threshold / norm) if norm > threshold else t


def compute_pg_buffer(prev: SmoeModel, nxt: SmoeModel, eta: float, gamma: int, clip: float = 2.0) -> PgBuffer:
    if eta <= 0:
        raise ConfigError("eta must be positive to form pseudo-gradients")
    if gamma < 1:
        raise ConfigError("gamma must be at least 1")
    scale = 1.0 / (eta * gamma)
    b, a = [], []
    for p0, p1 in zip(prev.layers, nxt.layers):
        b.append([_clip((e0.adapter.b - e1.adapter.b) * scale, clip) for e0, e1 in zip(p0.experts, p1.experts)])
        a.append([_clip((e0.adapter.a - e1.adapter.a) * scale, clip) for e0, e1 in zip(p0.experts, p1.experts)])
    return PgBuffer(b, a, clip)


def update_global_utilization(stats: list[UtilizationStats], weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if len(stats) != len(w) or not stats:
        raise ConfigError("need one weight per client")
    shape = stats[0].counts.shape
    out = np.zeros(shape)
    for wc, s in zip(w, stats):
        if s.counts.shape != shape:
            raise ConfigError("utilization stats cover different layer/expert grids")
        if np.any(s.tokens <= 0):
            raise ConfigError("a client reported zero processed tokens")
        out += wc * s.counts / s.tokens[:, None]
    return out


def update_modulation(phi_prev, u_tilde, u_star: float, eps: float, zeta: float, phi_min: float, phi_max: float) -> np.ndarray:
    """Tanh utilization target blended with the previous phi, then clamped."""
    if not 0 <= zeta <= 1:
        raise ConfigError("zeta must lie in [0, 1]")
    if eps <= 0:
        raise ConfigError("eps must be positive")
    target = np.tanh(u_star / (np.asarray(u_tilde, dtype=np.float64) + eps) - 1.0)
    return np.clip((1.0 - zeta) * target + zeta * np.asarray(phi_prev, dtype=np.float64), phi_min, phi_max)


# --- orchestration -----------------------------------------------------------


@dataclass
class RunResult:
    metrics: list[mx.RoundMetrics]
    state: ServerState
    profiles: list[ClientProfile]
    util_history: list[np.ndarray] = field(default_factory=list)
    k_bar_history: list[float] = field(default_factory=list)  # K-bar of each round's participants
    gate_sum_error: float = 0.0  # max |sum(gamma) - 1| over every training routing decision


def hyper_from_config(cfg: RunConfig, k_bar: float) -> FedHyper:
    return FedHyper(
        eta=cfg.eta, gamma=cfg.gamma, batch_size=cfg.batch_size, zeta=cfg.zeta, eps=cfg.eps,
        u_star=k_bar / cfg.dims.experts, phi_min=cfg.phi_min, phi_max=cfg.phi_max, lam=cfg.lam,
        n_p=cfg.n_p, pg_enabled=cfg.pg.enabled, pg_clip=cfg.pg.clip, dmr_enabled=cfg.dmr.enabled,
        phi_upload=cfg.dmr.phi_upload,
    )


def setup(cfg: RunConfig) -> tuple[ServerState, list[ClientProfile]]:
    task = generate_task(cfg.task_spec(), make_rng(cfg.seed, 0))
    part = partition_dirichlet(task, cfg.clients, cfg.dirichlet_alpha, make_rng(cfg.seed, 2))
    shards = [(task.x[ix], task.y[ix]) for ix in part.indices]
    profiles = make_profiles(cfg.client_budgets(), cfg.k_max, shards)
    k_bar = float(sum(p.p_c * p.k_c for p in profiles))
    dm = cfg.dims
    model = init_model(
        dm.d, dm.l, dm.layers, dm.experts, dm.rank, cfg.task.output_dim, cfg.seed,
        alpha=dm.lora_alpha, kind=cfg.task.kind, router_skew=cfg.router_skew,
    )
    hyper = hyper_from_config(cfg, k_bar)
    state = ServerState(model, PgBuffer.zeros(model, cfg.pg.clip), np.zeros((dm.layers, dm.experts)), 0, k_bar, hyper)
    return state, profiles


def _participants(cfg: RunConfig, t: int, n: int) -> list[int]:
    if cfg.participation >= 1.0:
        return list(range(n))
    m = max(1, int(round(cfg.participation * n)))
    return sorted(make_rng(cfg.seed, 3, t).choice(n, size=m, replace=False).tolist())


def _round_metrics(t, state, profiles, util, cfg) -> mx.RoundMetrics:
    model, hyper = state.model, state.hyper
    tier_num: dict[float, float] = {}
    tier_den: dict[float, float] = {}
    total = 0.0
    for p in profiles:
        loss = predict_loss(model, p.x, p.y, p.k_c, hyper.n_p)
        tier_num[p.beta] = tier_num.get(p.beta, 0.0) + p.p_c * loss
        tier_den[p.beta] = tier_den.get(p.beta, 0.0) + p.p_c
        total += p.p_c * loss
    tiers = {b: tier_num[b] / tier_den[b] for b in sorted(tier_num)}
    ent = [mx.utilization_entropy(u) for u in util]
    gin = [mx.gini(u) for u in util]
    try:
        r = mx.pearson(model.phis(), util)
    except ValueError:
        r = float("nan")
    dims = ModelDims(
        d=cfg.dims.d, l=cfg.dims.l, L_layers=cfg.dims.layers, M=cfg.dims.experts, r=cfg.dims.rank,
        gamma=cfg.gamma, batch=cfg.batch_size, clients=cfg.clients, seq_len=1,
    )
    flops = {p.id: client_cost_ubsmoe(dims, p.k_c, pseudo_gradients=hyper.pg_enabled) for p in profiles}
    return mx.RoundMetrics(t, tiers, total, ent, float(np.mean(ent)), gin, float(np.mean(gin)), r, flops)


def run_round(state: ServerState, profiles: list[ClientProfile], cfg: RunConfig, t: int):
    hyper = state.hyper
    chosen = _participants(cfg, t, len(profiles))
    w = np.array([profiles[c].p_c for c in chosen])
    w = w / w.sum()
    uploads, stats = [], []
    for c in chosen:
        rng = make_rng(cfg.seed, 4, t, c)
        try:
            model_c, stat_c, _ = client_local_train(
                profiles[c], state.model, state.pg if hyper.pg_enabled else None, hyper, rng
            )
        except (ConfigError, NumericalError) as exc:
            raise type(exc)(f"round {t}, client {c}: {exc}") from exc
        uploads.append(model_c)
        stats.append(stat_c)
    include_phi = hyper.dmr_enabled and hyper.phi_upload == "keep"
    new_model = aggregate_fedavg(uploads, w, include_phi=include_phi)
    new_pg = compute_pg_buffer(state.model, new_model, hyper.eta, hyper.gamma, hyper.pg_clip)
    util = update_global_utilization(stats, w)
    if hyper.dmr_enabled:
        prev = new_model if include_phi else state.model
        for j, p in enumerate(new_model.layers):
            p.phi = update_modulation(
                prev.layers[j].phi, util[j], state.u_star, hyper.eps, hyper.zeta, hyper.phi_min, hyper.phi_max
            )
    else:
        for j, p in enumerate(new_model.layers):
            p.phi = state.model.layers[j].phi.copy()
    for p in new_model.layers:
        for e in p.experts:
            if not (np.all(np.isfinite(e.adapter.a)) and np.all(np.isfinite(e.adapter.b))):
                raise NumericalError(f"round {t}: non-finite adapter after aggregation")
    state.model, state.pg, state.global_util = new_model, new_pg, util
    state.round = t + 1
    k_bar_round = float(np.dot(w, [profiles[c].k_c for c in chosen]))
    return util, k_bar_round, max(s.max_gate_error for s in stats)


def run_federated(cfg: RunConfig, on_round=None) -> RunResult:
    state, profiles = setup(cfg)
    result = RunResult([], state, profiles)
    for t in range(cfg.rounds):
        util, k_bar_round, gate_err = run_round(state, profiles, cfg, t)
        result.k_bar_history.append(k_bar_round)
        result.gate_sum_error = max(result.gate_sum_error, gate_err)
        m = _round_metrics(t, state, profiles, util, cfg)
        if not np.isfinite(m.train_loss):
            raise NumericalError(f"round {t}: non-finite training loss")
        result.metrics.append(m)
        result.util_history.append(util)
        log.info("round %d loss %.5f entropy %.4f gini %.4f", t, m.train_loss, m.entropy_mean, m.gini_mean)
        if on_round is not None:
            on_round(m, state)
    return result


# --- checkpoints -------------------------------------------------------------


def state_to_dict(state: ServerState) -> dict:
    def layer(p: SmoeLayerParams):
        return {
            "layer_index": p.layer_index,
            "router_w": p.router_w.tolist(),
            "phi": p.phi.tolist(),
            "experts": [
                {"w0": e.w0.tolist(), "b": e.adapter.b.tolist(), "a": e.adapter.a.tolist(), "alpha": e.adapter.alpha}
                for e in p.experts
            ],
        }

    return {
        "round": state.round,
        "k_bar": state.k_bar,
        "hyper": vars(state.hyper),
        "global_util": state.global_util.tolist(),
        "model": {"kind": state.model.kind, "head": state.model.head.tolist(), "layers": [layer(p) for p in state.model.layers]},
        "pg": {
            "clip": state.pg.clip_threshold,
            "b": [[t.tolist() for t in row] for row in state.pg.b],
            "a": [[t.tolist() for t in row] for row in state.pg.a],
        },
    }


def state_from_dict(data: dict) -> ServerState:
    arr = lambda v: np.array(v, dtype=np.float64)  # noqa: E731
    layers = []
    for ld in data["model"]["layers"]:
        experts = [Expert(arr(e["w0"]), ExpertAdapter(arr(e["b"]), arr(e["a"]), e["alpha"])) for e in ld["experts"]]
        layers.append(SmoeLayerParams(experts, arr(ld["router_w"]), arr(ld["phi"]), ld["layer_index"]))
    model = SmoeModel(layers, arr(data["model"]["head"]), data["model"]["kind"])
    pg = data["pg"]
    buffer = PgBuffer([[arr(t) for t in row] for row in pg["b"]], [[arr(t) for t in row] for row in pg["a"]], pg["clip"])
    return ServerState(model, buffer, arr(data["global_util"]), data["round"], data["k_bar"], FedHyper(**data["hyper"]))


def save_checkpoint(state: ServerState, path: str | Path) -> None:
    Path(path).write_text(json.dumps(state_to_dict(state)), encoding="utf-8")


def load_checkpoint(path: str | Path) -> ServerState:
    return state_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
