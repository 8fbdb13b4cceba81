"""Sparse mixture-of-experts layer with low-rank adapted linear experts.

Each expert is a frozen base map ``w0`` (d x l) plus a LoRA update
``(alpha / rank) * b @ a``.  Tokens are routed with modulated Top-K routing:
the ``n_p`` highest raw router scores form a candidate set whose logits are
shifted by the per-expert modulation vector ``phi``; the ``k_c`` largest
modulated logits are activated and mixed with a softmax over that set.

Backward passes are written by hand.  The discrete candidate and activation
sets are treated as constants, so gradients reach the router and ``phi`` only
through the gate weights of activated experts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import ConfigError, make_rng, softmax, topk_indices


@dataclass
class ExpertAdapter:
    b: np.ndarray  # d x r
    a: np.ndarray  # r x l
    alpha: float

    def __post_init__(self):
        if self.b.ndim != 2 or self.a.ndim != 2 or self.b.shape[1] != self.a.shape[0]:
            raise ConfigError(f"adapter shapes {self.b.shape} and {self.a.shape} do not chain")
        if self.alpha <= 0:
            raise ConfigError("adapter alpha must be positive")
        if self.rank > min(self.b.shape[0], self.a.shape[1]):
            raise ConfigError("adapter rank exceeds min(d, l)")

    @property
    def rank(self) -> int:
        return self.b.shape[1]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta_w(self) -> np.ndarray:
        return self.scale * (self.b @ self.a)


@dataclass
class Expert:
    w0: np.ndarray  # d x l, frozen
    adapter: ExpertAdapter

    def __post_init__(self):
        if self.w0.shape != (self.adapter.b.shape[0], self.adapter.a.shape[1]):
            raise ConfigError(f"w0 shape {self.w0.shape} does not match adapter")


@dataclass
class SmoeLayerParams:
    experts: list[Expert]
    router_w: np.ndarray  # M x d
    phi: np.ndarray  # M
    layer_index: int = 0

    def __post_init__(self):
        m = len(self.experts)
        if m < 2:
            raise ConfigError("an SMoE layer needs at least two experts")
        if self.router_w.shape != (m, self.in_dim):
            raise ConfigError(f"router shape {self.router_w.shape} != ({m}, {self.in_dim})")
        if self.phi.shape != (m,):
            raise ConfigError(f"phi must have length {m}")

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    @property
    def in_dim(self) -> int:
        return self.experts[0].w0.shape[0]

    @property
    def out_dim(self) -> int:
        return self.experts[0].w0.shape[1]

    def copy(self) -> "SmoeLayerParams":
        experts = [
            Expert(e.w0, ExpertAdapter(e.adapter.b.copy(), e.adapter.a.copy(), e.adapter.alpha))
            for e in self.experts
        ]
        return SmoeLayerParams(experts, self.router_w.copy(), self.phi.copy(), self.layer_index)


@dataclass
class RoutingDecision:
    candidate_set: np.ndarray
    activation_set: np.ndarray
    gate_weights: np.ndarray
    raw_scores: np.ndarray
    modulated_scores: np.ndarray


@dataclass
class LayerGradients:
    """Gradients for one layer.  ``pseudo[i]`` marks injected adapter grads."""

    b: list[np.ndarray]
    a: list[np.ndarray]
    router: np.ndarray
    phi: np.ndarray
    x: np.ndarray | None = None
    pseudo: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.pseudo is None:
            self.pseudo = np.zeros(len(self.b), dtype=bool)

    @classmethod
    def zeros(cls, p: SmoeLayerParams) -> "LayerGradients":
        return cls(
            b=[np.zeros_like(e.adapter.b) for e in p.experts],
            a=[np.zeros_like(e.adapter.a) for e in p.experts],
            router=np.zeros_like(p.router_w),
            phi=np.zeros_like(p.phi),
        )

    def accumulate(self, other: "LayerGradients", scale: float = 1.0) -> None:
        for i in range(len(self.b)):
            self.b[i] += scale * other.b[i]
            self.a[i] += scale * other.a[i]
        self.router += scale * other.router
        self.phi += scale * other.phi


def init_layer(
    in_dim: int,
    out_dim: int,
    num_experts: int,
    rank: int,
    rng: np.random.Generator,
    alpha: float | None = None,
    w0_scale: float = 1.0,
    router_scale: float = 1.0,
    layer_index: int = 0,
) -> SmoeLayerParams:
    """Random layer with ``b = 0`` so every adapter starts as a no-op."""
    bound = 1.0 / np.sqrt(in_dim)
    experts = []
    for _ in range(num_experts):
        w0 = rng.normal(0.0, w0_scale / np.sqrt(in_dim), size=(in_dim, out_dim))
        b = np.zeros((in_dim, rank))
        a = rng.uniform(-bound, bound, size=(rank, out_dim))
        experts.append(Expert(w0, ExpertAdapter(b, a, float(alpha if alpha is not None else rank))))
    router = rng.normal(0.0, router_scale / np.sqrt(in_dim), size=(num_experts, in_dim))
    return SmoeLayerParams(experts, router, np.zeros(num_experts), layer_index)


def random_layer(seed: int, in_dim: int, out_dim: int, num_experts: int, rank: int) -> SmoeLayerParams:
    """Layer with nonzero adapters and phi, used by gradient checks."""
    rng = make_rng(seed)
    p = init_layer(in_dim, out_dim, num_experts, rank, rng, alpha=float(rng.uniform(0.5, 2.0) * rank))
    for e in p.experts:
        e.adapter.b[:] = rng.normal(0.0, 0.5, size=e.adapter.b.shape)
    p.phi[:] = rng.uniform(-1.0, 1.0, size=num_experts)
    return p


def expert_forward(e: Expert, x: np.ndarray) -> np.ndarray:
    if x.shape != (e.w0.shape[0],):
        raise ConfigError(f"input length {x.shape} != expert input dim {e.w0.shape[0]}")
    ad = e.adapter
    return e.w0.T @ x + ad.scale * (ad.a.T @ (ad.b.T @ x))


def _check_routing_sizes(num_experts: int, k_c: int, n_p: int) -> None:
    if k_c < 1:
        raise ConfigError(f"k_c={k_c} must be at least 1")
    if n_p > num_experts:
        raise ConfigError(f"n_p={n_p} exceeds the number of experts {num_experts}")
    if k_c > n_p:
        raise ConfigError(f"k_c={k_c} exceeds candidate size n_p={n_p}")


def route_dmr(p: SmoeLayerParams, x: np.ndarray, k_c: int, n_p: int) -> RoutingDecision:
    _check_routing_sizes(p.num_experts, k_c, n_p)
    if x.shape != (p.in_dim,):
        raise ConfigError(f"input length {x.shape} != layer input dim {p.in_dim}")
    s = p.router_w @ x
    cand = topk_indices(s, n_p)
    m = s.copy()
    m[cand] += p.phi[cand]
    act = topk_indices(m, k_c)
    gamma = np.zeros_like(s)
    gamma[act] = softmax(m[act])
    return RoutingDecision(cand, act, gamma, s, m)


def smoe_forward(
    p: SmoeLayerParams, x: np.ndarray, k_c: int, n_p: int
) -> tuple[np.ndarray, RoutingDecision]:
    dec = route_dmr(p, x, k_c, n_p)
    y = np.zeros(p.out_dim)
    for i in dec.activation_set:
        y += dec.gate_weights[i] * expert_forward(p.experts[i], x)
    return y, dec


def smoe_backward(
    p: SmoeLayerParams,
    x: np.ndarray,
    dec: RoutingDecision,
    upstream: np.ndarray,
    out: LayerGradients | None = None,
) -> LayerGradients:
    """Gradients of ``<upstream, y>`` with the routing sets held fixed.

    When ``out`` is given the parameter gradients are added into it (batch
    accumulation); ``out.x`` is overwritten with this token's input gradient.
    """
    if dec.gate_weights.shape != (p.num_experts,) or x.shape != (p.in_dim,):
        raise ConfigError("routing decision does not match the layer or input")
    if upstream.shape != (p.out_dim,):
        raise ConfigError(f"upstream length {upstream.shape} != {p.out_dim}")
    g = LayerGradients.zeros(p) if out is None else out
    dx = np.zeros(p.in_dim)
    act = dec.activation_set
    dgamma = np.zeros(len(act))
    for j, i in enumerate(act):
        e = p.experts[i]
        ad = e.adapter
        gi = dec.gate_weights[i] * upstream
        h = ad.b.T @ x
        ag = ad.a @ gi
        g.b[i] += ad.scale * np.outer(x, ag)
        g.a[i] += ad.scale * np.outer(h, gi)
        dx += e.w0 @ gi + ad.scale * (ad.b @ ag)
        dgamma[j] = upstream @ expert_forward(e, x)
    gam = dec.gate_weights[act]
    dm_act = gam * (dgamma - gam @ dgamma)
    g.router[act] += np.outer(dm_act, x)
    dx += p.router_w[act].T @ dm_act
    in_cand = np.isin(act, dec.candidate_set)
    g.phi[act[in_cand]] += dm_act[in_cand]
    g.x = dx
    return g


def phi_regularization_loss(
    phi: np.ndarray, phi_min: float, phi_max: float, lam: float
) -> tuple[float, np.ndarray]:
    if not phi_min < phi_max:
        raise ConfigError("phi_min must be below phi_max")
    below = np.maximum(phi_min - phi, 0.0)
    above = np.maximum(phi - phi_max, 0.0)
    loss = lam * (float(below @ below) + float(above @ above))
    return loss, 2.0 * lam * (above - below)
