"""Dense linear algebra helpers and seeded random streams.

Matrices are plain ``float64`` numpy arrays; the helpers here only add the
shape checks and deterministic tie-breaking the rest of the package relies on.
"""

from __future__ import annotations

import numpy as np


class ConfigError(ValueError):
    """Raised when shapes or hyperparameters violate a precondition."""


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    m = np.array(data, dtype=np.float64)
    if m.ndim != 2:
        raise ConfigError(f"expected a 2-D matrix, got shape {m.shape}")
    if rows is not None and m.shape[0] != rows or cols is not None and m.shape[1] != cols:
        raise ConfigError(f"expected shape ({rows}, {cols}), got {m.shape}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ConfigError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ConfigError(f"dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax input must be finite")
    e = np.exp(v - v.max())
    return e / e.sum()


def topk_indices(v, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries, largest first.

    Ties go to the lower index, so the selection is a deterministic function
    of the values and invariant under strictly increasing transforms.
    """
    v = np.asarray(v, dtype=np.float64)
    if not 1 <= k <= v.size:
        raise ValueError(f"k={k} out of range for length {v.size}")
    # stable sort on -v keeps lower indices first among equal values
    return np.argsort(-v, kind="stable")[:k]


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based (Philox) generator for the stream ``(seed, *keys)``.

    Distinct key tuples give statistically independent streams, so each
    (round, client, ...) task can own its generator without coordination.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))
