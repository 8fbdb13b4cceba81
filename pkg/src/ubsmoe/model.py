"""A stack of SMoE layers with a linear task head, trained by plain SGD."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ConfigError, make_rng, softmax
from .smoe import LayerGradients, SmoeLayerParams, init_layer, phi_regularization_loss, smoe_backward, smoe_forward


@dataclass
class SmoeModel:
    """``h_{j+1} = h_j + layer_j(h_j)`` when widths match, else ``layer_j(h_j)``; output ``head @ h_L``."""

    layers: list[SmoeLayerParams]
    head: np.ndarray  # out x width
    kind: str = "cluster-regression"

    def copy(self) -> "SmoeModel":
        return SmoeModel([p.copy() for p in self.layers], self.head.copy(), self.kind)

    @property
    def residual(self) -> bool:
        return all(p.in_dim == p.out_dim for p in self.layers)

    def phis(self) -> np.ndarray:
        return np.stack([p.phi for p in self.layers])


@dataclass
class ModelGradients:
    layers: list[LayerGradients]
    head: np.ndarray


@dataclass
class BatchResult:
    loss: float  # task loss + phi regularization
    task_loss: float
    grads: ModelGradients
    counts: np.ndarray  # L x M activation counts over the batch
    decisions: list


def init_model(
    d: int,
    l: int,
    num_layers: int,
    num_experts: int,
    rank: int,
    out_dim: int,
    seed: int,
    alpha: float | None = None,
    kind: str = "cluster-regression",
    router_skew: float = 0.0,
    skew_experts: int | None = None,
) -> SmoeModel:
    """Fresh model; ``router_skew`` adds a constant to the last input column of
    every router row for the first ``skew_experts`` experts.

    With a constant trailing input feature this biases routing toward those
    experts regardless of the token.
    """
    if num_layers > 1 and d != l:
        raise ConfigError("stacked layers use residual connections and need l == d")
    rng = make_rng(seed, 1)
    layers = []
    for j in range(num_layers):
        in_dim = d if j == 0 else l
        p = init_layer(in_dim, l, num_experts, rank, rng, alpha=alpha, w0_scale=0.3, layer_index=j)
        if router_skew:
            hot = skew_experts if skew_experts is not None else max(1, num_experts // 4)
            p.router_w[:hot, -1] += router_skew
        layers.append(p)
    head = rng.normal(0.0, 1.0 / np.sqrt(l), size=(out_dim, l))
    return SmoeModel(layers, head, kind)


def _task_loss(kind: str, out: np.ndarray, target) -> tuple[float, np.ndarray]:
    if kind == "cluster-regression":
        diff = out - target
        return 0.5 * float(diff @ diff), diff
    probs = softmax(out)
    label = int(target)
    grad = probs.copy()
    grad[label] -= 1.0
    return -float(np.log(max(probs[label], 1e-300))), grad


def forward(model: SmoeModel, x: np.ndarray, k_c: int, n_p: int):
    h = x
    cache = []
    for p in model.layers:
        y, dec = smoe_forward(p, h, k_c, n_p)
        cache.append((h, dec))
        h = h + y if model.residual else y
    return model.head @ h, h, cache


def predict_loss(model: SmoeModel, xs: np.ndarray, ys, k_c: int, n_p: int) -> float:
    total = 0.0
    for x, y in zip(xs, ys):
        out, _, _ = forward(model, x, k_c, n_p)
        total += _task_loss(model.kind, out, y)[0]
    return total / len(xs)


def batch_loss_and_grads(
    model: SmoeModel,
    xs: np.ndarray,
    ys,
    k_c: int,
    n_p: int,
    phi_min: float = -1.0,
    phi_max: float = 1.0,
    lam: float = 0.0,
) -> BatchResult:
    """Mean task loss over the batch plus phi regularization, with gradients."""
    L = len(model.layers)
    grads = ModelGradients([LayerGradients.zeros(p) for p in model.layers], np.zeros_like(model.head))
    counts = np.zeros((L, model.layers[0].num_experts), dtype=np.int64)
    n = len(xs)
    task = 0.0
    decisions = []
    for x, y in zip(xs, ys):
        out, h_last, cache = forward(model, x, k_c, n_p)
        loss, dout = _task_loss(model.kind, out, y)
        task += loss
        dout = dout / n
        grads.head += np.outer(dout, h_last)
        dh = model.head.T @ dout
        for j in reversed(range(L)):
            h_in, dec = cache[j]
            g = smoe_backward(model.layers[j], h_in, dec, dh, out=grads.layers[j])
            dh = g.x + dh if model.residual else g.x
            counts[j, dec.activation_set] += 1
        decisions.append([c[1] for c in cache])
    task /= n
    reg = 0.0
    for p, g in zip(model.layers, grads.layers):
        r_loss, r_grad = phi_regularization_loss(p.phi, phi_min, phi_max, lam)
        reg += r_loss
        g.phi += r_grad
    return BatchResult(task + reg, task, grads, counts, decisions)


def sgd_step(model: SmoeModel, grads: ModelGradients, eta: float, train_phi: bool = True) -> None:
    for p, g in zip(model.layers, grads.layers):
        for i, e in enumerate(p.experts):
            e.adapter.b -= eta * g.b[i]
            e.adapter.a -= eta * g.a[i]
        p.router_w -= eta * g.router
        if train_phi:
            p.phi -= eta * g.phi
    model.head -= eta * grads.head
