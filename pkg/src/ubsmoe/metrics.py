"""Expert-utilization balance metrics and the per-round metrics record."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class RoundMetrics:
    round: int
    tier_loss: dict[float, float]
    train_loss: float
    layer_entropy: list[float]
    entropy_mean: float
    layer_gini: list[float]
    gini_mean: float
    pearson_r: float  # nan when undefined (constant phi or utilization)
    flops: dict[int, float] = field(default_factory=dict)


def utilization_entropy(u) -> float:
    """``-sum u_i ln u_i`` on the raw rates, with ``0 ln 0 = 0``."""
    u = np.asarray(u, dtype=np.float64)
    if np.any(u < 0):
        raise ValueError("utilization rates must be nonnegative")
    nz = u[u > 0]
    return float(-(nz * np.log(nz)).sum())


def gini(u) -> float:
    u = np.asarray(u, dtype=np.float64)
    if np.any(u < 0):
        raise ValueError("utilization rates must be nonnegative")
    total = u.sum()
    if total <= 0:
        raise ValueError("gini of an all-zero vector is undefined")
    return float(np.abs(u[:, None] - u[None, :]).sum() / (2 * u.size * total))


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size or x.size < 2:
        raise ValueError("pearson needs two equal-length vectors of length >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(dx @ dx), np.sqrt(dy @ dy)
    if sx == 0 or sy == 0:
        raise ValueError("pearson correlation undefined for zero variance")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))
