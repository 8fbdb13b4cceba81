"""Cluster-structured synthetic tasks and Dirichlet non-IID partitioning."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import ConfigError

KINDS = ("cluster-regression", "cluster-classification")


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "cluster-regression"
    input_dim: int = 8
    output_dim: int = 4
    num_clusters: int = 4
    num_samples: int = 512
    noise: float = 0.05
    cluster_sep: float = 3.0
    bias_feature: bool = True
    cluster_std: float = 1.0  # within-cluster feature spread


@dataclass
class SyntheticTask:
    spec: TaskSpec
    x: np.ndarray  # n x input_dim
    y: np.ndarray  # n x output_dim (regression) or n labels (classification)
    clusters: np.ndarray  # n
    means: np.ndarray  # num_clusters x feature_dim
    maps: np.ndarray  # num_clusters x output_dim x input_dim

    @property
    def num_samples(self) -> int:
        return self.x.shape[0]


@dataclass
class Partition:
    indices: list[np.ndarray]
    alpha: float
    mixtures: np.ndarray  # num_clients x num_clusters, the drawn Dirichlet rows

    def weights(self) -> np.ndarray:
        sizes = np.array([len(ix) for ix in self.indices], dtype=np.float64)
        return sizes / sizes.sum()


def _cluster_means(k: int, f: int, sep: float, rng: np.random.Generator) -> np.ndarray:
    if k <= f:
        # orthonormal directions scaled so every pair sits exactly `sep` apart
        q, _ = np.linalg.qr(rng.normal(size=(f, f)))
        return q[:, :k].T * (sep / np.sqrt(2.0))
    dirs = rng.normal(size=(k, f))
    return sep * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def generate_task(spec: TaskSpec, rng: np.random.Generator) -> SyntheticTask:
    if spec.kind not in KINDS:
        raise ConfigError(f"unknown task kind {spec.kind!r}")
    if spec.num_samples < 1:
        raise ConfigError("a task needs at least one sample")
    if spec.input_dim < 1 + spec.bias_feature or spec.output_dim < 1 or spec.num_clusters < 1:
        raise ConfigError("task dimensions and cluster count must be positive")
    if spec.cluster_std < 0:
        raise ConfigError("cluster_std must be nonnegative")
    f = spec.input_dim - int(spec.bias_feature)
    means = _cluster_means(spec.num_clusters, f, spec.cluster_sep, rng)
    maps = rng.normal(0.0, 1.0 / np.sqrt(spec.input_dim), size=(spec.num_clusters, spec.output_dim, spec.input_dim))
    clusters = rng.integers(0, spec.num_clusters, size=spec.num_samples)
    feats = means[clusters] + spec.cluster_std * rng.normal(size=(spec.num_samples, f))
    if spec.bias_feature:
        feats = np.hstack([feats, np.ones((spec.num_samples, 1))])
    clean = np.einsum("nod,nd->no", maps[clusters], feats)
    if spec.kind == "cluster-regression":
        y = clean + spec.noise * rng.normal(size=clean.shape)
    else:
        y = np.argmax(clean + spec.noise * rng.normal(size=clean.shape), axis=1)
    return SyntheticTask(spec, feats, y, clusters, means, maps)


def _largest_remainder(total: int, shares: np.ndarray) -> np.ndarray:
    raw = shares * total
    counts = np.floor(raw).astype(int)
    short = total - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def _allocate(task: SyntheticTask, mixtures: np.ndarray, rng: np.random.Generator) -> list[list[int]]:
    n_clients = mixtures.shape[0]
    out: list[list[int]] = [[] for _ in range(n_clients)]
    for k in range(task.spec.num_clusters):
        members = rng.permutation(np.flatnonzero(task.clusters == k))
        col = mixtures[:, k]
        shares = col / col.sum() if col.sum() > 0 else np.full(n_clients, 1.0 / n_clients)
        start = 0
        for c, cnt in enumerate(_largest_remainder(len(members), shares)):
            out[c].extend(members[start:start + cnt].tolist())
            start += cnt
    return out


def partition_dirichlet(
    task: SyntheticTask, num_clients: int, alpha: float, rng: np.random.Generator, max_redraws: int = 100
) -> Partition:
    """Split ``task`` across clients whose cluster mixtures are Dirichlet(alpha) draws.

    Each cluster's samples are shared among clients in proportion to the
    clients' mixture weights for that cluster.  A client left empty gets its
    mixture redrawn; if that keeps failing, it takes one sample from the
    largest client.
    """
    if num_clients < 1 or alpha <= 0:
        raise ConfigError("need num_clients >= 1 and alpha > 0")
    if num_clients > task.num_samples:
        raise ConfigError(f"{num_clients} clients but only {task.num_samples} samples")
    k = task.spec.num_clusters
    mixtures = rng.dirichlet(np.full(k, alpha), size=num_clients)
    alloc = _allocate(task, mixtures, rng)
    for _ in range(max_redraws):
        empty = [c for c, ix in enumerate(alloc) if not ix]
        if not empty:
            break
        for c in empty:
            mixtures[c] = rng.dirichlet(np.full(k, alpha))
        alloc = _allocate(task, mixtures, rng)
    for c in range(num_clients):
        if not alloc[c]:
            donor = max(range(num_clients), key=lambda j: len(alloc[j]))
            alloc[c].append(alloc[donor].pop())
    return Partition([np.array(sorted(ix), dtype=int) for ix in alloc], alpha, mixtures)


def dump_csv(task: SyntheticTask, path: str | Path) -> None:
    d = task.x.shape[1]
    ys = task.y.reshape(task.num_samples, -1)
    header = [f"x{j}" for j in range(d)] + [f"y{j}" for j in range(ys.shape[1])] + ["cluster"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for xi, yi, ci in zip(task.x, ys, task.clusters):
            w.writerow([repr(float(v)) for v in xi] + [repr(float(v)) for v in yi] + [int(ci)])


def load_csv(path: str | Path, spec: TaskSpec) -> SyntheticTask:
    """Read a dump back; ``means`` and ``maps`` are not stored and come back empty."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=np.float64)
    nx = sum(h.startswith("x") for h in header)
    x = body[:, :nx]
    y = body[:, nx:-1]
    if spec.kind == "cluster-classification":
        y = y[:, 0].astype(int)
    return SyntheticTask(spec, x, y, body[:, -1].astype(int), np.empty((0, 0)), np.empty((0, 0, 0)))
