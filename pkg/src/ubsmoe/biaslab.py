"""Sparse-gradient bias on a block-separable quadratic.

Each client ``c`` has loss ``F_c(theta) = 1/2 sum_i ||theta_i - target[c, i]||^2``
and activates expert block ``i`` with marginal probability ``probs[c, i]``,
always drawing exactly ``K_c = sum_i probs[c, i]`` blocks.  Because the blocks
are separable, the gradient conditional on activation equals the plain block
gradient, so the expected masked gradient is exactly ``p * grad`` and the
bias is exactly ``(1 - p) * grad``.

The floor experiments mix one always-dense reference client with probe
clients of sparsity ``K``: biased SGD then settles at a point away from the
global optimum, and the gap it plateaus at is what the experiments measure.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from .numerics import make_rng

_TOL = 1e-9


@dataclass
class QuadraticMoeObjective:
    targets: np.ndarray  # C x M x dim
    probs: np.ndarray  # C x M, row sums are the K_c
    weights: np.ndarray  # C, sums to 1

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.float64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        validate_probs(self.probs)
        if self.targets.shape[:2] != self.probs.shape:
            raise ValueError("targets and probs disagree on clients/experts")
        if not np.isclose(self.weights.sum(), 1.0, atol=1e-12, rtol=0):
            raise ValueError("client weights must sum to 1")

    @property
    def num_experts(self) -> int:
        return self.probs.shape[1]

    @property
    def k(self) -> np.ndarray:
        return np.rint(self.probs.sum(axis=1)).astype(int)

    def optimum(self) -> np.ndarray:
        return np.einsum("c,cmd->md", self.weights, self.targets)

    def value(self, theta: np.ndarray) -> float:
        diff = theta[None] - self.targets
        return 0.5 * float(np.einsum("c,cmd,cmd->", self.weights, diff, diff))

    def optimal_value(self) -> float:
        return self.value(self.optimum())

    def client_grad(self, theta: np.ndarray, client: int) -> np.ndarray:
        return theta - self.targets[client]

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return theta - self.optimum()


@dataclass
class BiasReport:
    client_bias_sq: np.ndarray
    aggregate_bias_sq: float
    lower: np.ndarray
    upper: np.ndarray
    plateau_gap: float | None = None


def validate_probs(probs: np.ndarray) -> None:
    probs = np.atleast_2d(probs)
    if np.any(probs < -_TOL) or np.any(probs > 1 + _TOL):
        raise ValueError("activation probabilities must lie in [0, 1]")
    sums = probs.sum(axis=1)
    if np.any(np.abs(sums - np.rint(sums)) > _TOL) or np.any(np.rint(sums) < 1):
        raise ValueError("each row of activation probabilities must sum to an integer K >= 1")


def balanced_probs(m: int, k: int) -> np.ndarray:
    return np.full(m, k / m)


def imbalanced_probs(m: int, k: int) -> np.ndarray:
    """Maximal imbalance: ``k`` blocks always on, the rest never."""
    p = np.zeros(m)
    p[:k] = 1.0
    return p


def random_feasible_probs(m: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Random vector in [0, 1]^m summing to ``k`` (capped Dirichlet water-filling)."""
    if k == m:
        return np.ones(m)  # the only feasible point; scaling would leave 1 - ulp entries
    p = rng.dirichlet(np.ones(m)) * k
    for _ in range(m):
        over = p > 1.0
        if not over.any():
            break
        excess = (p[over] - 1.0).sum()
        p[over] = 1.0
        free = ~over & (p < 1.0)
        p[free] += excess * p[free] / p[free].sum()
    return p


def sample_masks(p: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` independent activation masks, each with exactly ``sum(p)`` entries set.

    Systematic (Madow) sampling over a random ordering: unit-spaced points
    from one uniform offset fall into the cumulative intervals, and since no
    interval is longer than 1 no index is hit twice.  Inclusion
    probabilities are exactly ``p``.
    """
    p = np.asarray(p, dtype=np.float64)
    m, k = p.size, int(round(p.sum()))
    order = np.argsort(rng.random((n, m)), axis=1)
    edges = np.cumsum(p[order], axis=1)
    points = rng.random(n)[:, None] + np.arange(k)
    hits = (edges[:, None, :] <= points[:, :, None]).sum(axis=2)
    hits = np.minimum(hits, m - 1)
    mask = np.zeros((n, m), dtype=bool)
    rows = np.repeat(np.arange(n), k)
    mask[rows, np.take_along_axis(order, hits, axis=1).ravel()] = True
    return mask


def systematic_sample(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Sorted indices of one activation draw (see ``sample_masks``)."""
    return np.flatnonzero(sample_masks(p, 1, rng)[0])


def sparse_grad_sample(
    obj: QuadraticMoeObjective, theta: np.ndarray, client: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Masked client gradient and the boolean activation mask it used."""
    validate_probs(obj.probs[client])
    mask = np.zeros(obj.num_experts, dtype=bool)
    mask[systematic_sample(obj.probs[client], rng)] = True
    return obj.client_grad(theta, client) * mask[:, None], mask


def exact_bias(obj: QuadraticMoeObjective, theta: np.ndarray, client: int) -> np.ndarray:
    return (1.0 - obj.probs[client])[:, None] * obj.client_grad(theta, client)


def corollary_bounds(block_norms_sq: np.ndarray, k: int) -> tuple[float, float]:
    m = block_norms_sq.size
    return float(block_norms_sq.min() * m * (1 - k / m) ** 2), float(block_norms_sq.max() * (m - k))


def bias_report(obj: QuadraticMoeObjective, theta: np.ndarray) -> BiasReport:
    n_clients = obj.probs.shape[0]
    per_client = np.array([float(np.sum(exact_bias(obj, theta, c) ** 2)) for c in range(n_clients)])
    agg = sum(obj.weights[c] * exact_bias(obj, theta, c) for c in range(n_clients))
    lo, hi = np.zeros(n_clients), np.zeros(n_clients)
    for c in range(n_clients):
        norms = np.sum(obj.client_grad(theta, c) ** 2, axis=1)
        lo[c], hi[c] = corollary_bounds(norms, int(obj.k[c]))
    return BiasReport(per_client, float(np.sum(agg**2)), lo, hi)


def probs_hash(probs: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(probs, dtype=np.float64).tobytes()).hexdigest()[:12]


def floor_objective(m: int, dim: int, seed: int, n_probe: int = 1) -> QuadraticMoeObjective:
    """One dense reference client (row 0) plus ``n_probe`` probe clients, equal weights.

    Probe rows start dense; ``with_probe_sparsity`` sets them to a given K.
    """
    rng = make_rng(seed)
    n = 1 + n_probe
    targets = rng.normal(size=(n, m, dim))
    return QuadraticMoeObjective(targets, np.ones((n, m)), np.full(n, 1.0 / n))


def with_probe_sparsity(obj: QuadraticMoeObjective, k: int, imbalanced: bool = False) -> QuadraticMoeObjective:
    m = obj.num_experts
    row = imbalanced_probs(m, k) if imbalanced else balanced_probs(m, k)
    probs = obj.probs.copy()
    probs[1:] = row
    return replace(obj, probs=probs)


def default_eta(t: int, eta0: float = 0.5) -> float:
    return eta0 / np.sqrt(t + 1.0)


def _biased_sgd(
    obj: QuadraticMoeObjective,
    steps: int,
    seed: int,
    eta_schedule,
    rho: float = 0.0,
) -> np.ndarray:
    """Each step every client contributes its masked gradient (weighted by ``p_c``).

    With ``rho > 0`` the blocks a client did not draw receive ``rho`` times
    the population gradient instead of zero.  Returns ``F(theta_t) - F*``.
    """
    rng = make_rng(seed, 7)
    theta = np.zeros_like(obj.targets[0])
    f_star = obj.optimal_value()
    gaps = np.empty(steps)
    for t in range(steps):
        step = np.zeros_like(theta)
        pop = obj.grad(theta)
        for c in range(obj.probs.shape[0]):
            g, mask = sparse_grad_sample(obj, theta, c, rng)
            if rho:
                g = g + rho * pop * (~mask)[:, None]
            step += obj.weights[c] * g
        theta = theta - eta_schedule(t) * step
        gaps[t] = obj.value(theta) - f_star
    return gaps


def plateau(gaps: np.ndarray) -> float:
    tail = gaps[-max(1, len(gaps) // 10):]
    return float(tail.mean())


def run_floor_experiment(
    obj: QuadraticMoeObjective,
    k_values,
    steps: int = 4000,
    seed: int = 0,
    eta_schedule=default_eta,
    imbalanced: bool = False,
) -> dict[int, dict]:
    """Plateau gap per probe sparsity K.

    The result also carries the initial gap and a ``diverged`` flag, set
    when the last-decile mean exceeds the mean of the decile before it by
    more than 50% plus a small absolute slack.
    """
    out = {}
    for k in k_values:
        o = with_probe_sparsity(obj, k, imbalanced)
        gaps = _biased_sgd(o, steps, seed, eta_schedule)
        tail = max(1, steps // 10)
        prev = gaps[-2 * tail:-tail] if steps >= 2 * tail else gaps[:tail]
        initial = o.value(np.zeros_like(o.targets[0])) - o.optimal_value()
        out[k] = {
            "plateau_gap": plateau(gaps),
            "initial_gap": float(initial),
            "diverged": bool(gaps[-tail:].mean() > 1.5 * prev.mean() + 1e-12) or not np.isfinite(gaps[-1]),
            "probs": o.probs,
        }
    return out


def pg_floor_comparison(
    obj: QuadraticMoeObjective,
    k: int,
    steps: int = 4000,
    seed: int = 0,
    rho: float | None = None,
    eta_schedule=default_eta,
) -> tuple[float, float]:
    """Plateau gaps without and with ideal pseudo-gradients for the undrawn blocks."""
    o = with_probe_sparsity(obj, k)
    if rho is None:
        kbar = float(o.weights @ o.k)
        rho = float(np.sqrt(kbar / k))
    naive = plateau(_biased_sgd(o, steps, seed, eta_schedule))
    pg = plateau(_biased_sgd(o, steps, seed, eta_schedule, rho=rho))
    return naive, pg
