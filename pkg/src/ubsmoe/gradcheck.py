"""Central finite-difference checks for the hand-written SMoE backward pass.

The routing sets are frozen at the values the unperturbed input produced, so
the checked function is smooth in every parameter.
"""

from __future__ import annotations

import numpy as np

from .numerics import make_rng, softmax
from .smoe import RoutingDecision, SmoeLayerParams, expert_forward, random_layer, route_dmr, smoe_backward

GROUPS = ("adapter_b", "adapter_a", "router", "phi", "input")


def frozen_forward(p: SmoeLayerParams, x: np.ndarray, dec: RoutingDecision) -> np.ndarray:
    """Layer output with the candidate and activation sets of ``dec`` held fixed."""
    m = p.router_w @ x
    m[dec.candidate_set] += p.phi[dec.candidate_set]
    act = dec.activation_set
    gam = softmax(m[act])
    return sum(g * expert_forward(p.experts[i], x) for g, i in zip(gam, act))


def _fd(f, arr: np.ndarray, h: float) -> np.ndarray:
    out = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        ix = it.multi_index
        old = arr[ix]
        arr[ix] = old + h
        up = f()
        arr[ix] = old - h
        down = f()
        arr[ix] = old
        out[ix] = (up - down) / (2 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = float(np.linalg.norm(analytic - numeric))
    den = float(np.linalg.norm(analytic) + np.linalg.norm(numeric))
    return 0.0 if den == 0.0 else num / den


def check_layer(p: SmoeLayerParams, x: np.ndarray, upstream: np.ndarray, k_c: int, n_p: int, h: float = 1e-6) -> dict:
    """Max relative error per parameter group for ``<upstream, y(x)>``."""
    dec = route_dmr(p, x, k_c, n_p)
    g = smoe_backward(p, x, dec, upstream)

    def f():
        return float(upstream @ frozen_forward(p, x, dec))

    err = {k: 0.0 for k in GROUPS}
    for i, e in enumerate(p.experts):
        err["adapter_b"] = max(err["adapter_b"], relative_error(g.b[i], _fd(f, e.adapter.b, h)))
        err["adapter_a"] = max(err["adapter_a"], relative_error(g.a[i], _fd(f, e.adapter.a, h)))
    err["router"] = relative_error(g.router, _fd(f, p.router_w, h))
    err["phi"] = relative_error(g.phi, _fd(f, p.phi, h))
    xv = x.copy()
    err["input"] = relative_error(g.x, _fd(lambda: float(upstream @ frozen_forward(p, xv, dec)), xv, h))
    return err


def random_suite(n_layers: int, seed: int = 0, max_dim: int = 8, max_experts: int = 6, max_rank: int = 3):
    """Yield ``(layer, x, upstream, k_c, n_p)`` cases with random small shapes."""
    rng = make_rng(seed, 9)
    for case in range(n_layers):
        d = int(rng.integers(2, max_dim + 1))
        l = int(rng.integers(2, max_dim + 1))
        m = int(rng.integers(2, max_experts + 1))
        r = int(rng.integers(1, min(max_rank, d, l) + 1))
        n_p = int(rng.integers(1, m + 1))
        k_c = int(rng.integers(1, n_p + 1))
        p = random_layer(seed * 1000 + case, d, l, m, r)
        yield p, rng.normal(size=d), rng.normal(size=l), k_c, n_p


def run_suite(n_layers: int = 20, seed: int = 0) -> dict:
    worst = {k: 0.0 for k in GROUPS}
    for p, x, up, k_c, n_p in random_suite(n_layers, seed):
        for k, v in check_layer(p, x, up, k_c, n_p).items():
            worst[k] = max(worst[k], v)
    return worst
