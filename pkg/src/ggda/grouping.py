"""Partitions of the training set: random chunks and whitened k-means variants."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist

from ggda import models
from ggda.datahub import Dataset, validate_groups
from ggda.errors import SchemaError
from ggda.numkit import make_rng, whiten

METHODS = ("random", "kmeans", "repr_kmeans", "grad_kmeans")
FEATURE_MODES = {"kmeans": "raw", "repr_kmeans": "repr", "grad_kmeans": "grad"}

KMEANS_TOL = 1e-3
KMEANS_MAX_ITER = 60


@dataclass
class Partition:
    groups: list[list[int]]
    method: str = "random"
    target_group_size: int = 1
    seed: int = 0

    def __post_init__(self):
        self.groups = [sorted(int(i) for i in g) for g in self.groups]
        validate_groups(self.groups)

    @property
    def k(self) -> int:
        return len(self.groups)

    @property
    def n(self) -> int:
        return sum(len(g) for g in self.groups)

    def sizes(self) -> list[int]:
        return [len(g) for g in self.groups]

    def labels(self) -> np.ndarray:
        """Group id of every train position."""
        out = np.empty(self.n, dtype=np.int64)
        for j, g in enumerate(self.groups):
            out[g] = j
        return out

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "target_group_size": self.target_group_size,
            "groups": self.groups,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Partition":
        try:
            return cls(
                groups=obj["groups"],
                method=str(obj["method"]),
                target_group_size=int(obj["target_group_size"]),
                seed=int(obj["seed"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed partition: {exc!r}") from exc

    @classmethod
    def singletons(cls, n: int) -> "Partition":
        return cls([[i] for i in range(n)], method="singleton", target_group_size=1)

    @classmethod
    def from_labels(cls, labels: np.ndarray, **kw) -> "Partition":
        labels = np.asarray(labels)
        ids = np.unique(labels)
        return cls([np.flatnonzero(labels == j).tolist() for j in ids], **kw)


def target_size_to_k(n_train: int, group_size: int) -> int:
    if group_size < 1:
        raise ValueError("group_size must be at least 1")
    return math.ceil(n_train / group_size)


def random_partition(n_train: int, group_size: int, rng: np.random.Generator, seed: int = 0) -> Partition:
    if not 1 <= group_size <= n_train:
        raise ValueError(f"group_size must be in [1, {n_train}]")
    perm = rng.permutation(n_train)
    groups = [perm[s : s + group_size].tolist() for s in range(0, n_train, group_size)]
    return Partition(groups, "random", group_size, seed)


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    n_iter: int
    inertia_history: list[float] = field(default_factory=list)

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1]


def kmeans_plus_plus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of k distinct seed points drawn with D^2 weighting."""
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    taken = np.zeros(n, dtype=bool)
    taken[chosen[0]] = True
    for _ in range(1, k):
        w = np.where(taken, 0.0, d2)
        total = w.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=w / total))
        else:
            # every remaining point coincides with a center
            nxt = int(rng.choice(np.flatnonzero(~taken)))
        chosen.append(nxt)
        taken[nxt] = True
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    return np.asarray(chosen)


def _repair_empty(X, labels, centers, dist):
    """Give each empty cluster the point farthest from the largest cluster's center."""
    k = centers.shape[0]
    counts = np.bincount(labels, minlength=k)
    for j in np.flatnonzero(counts == 0):
        big = int(np.argmax(counts))
        members = np.flatnonzero(labels == big)
        far = members[int(np.argmax(dist[members, big]))]
        labels[far] = j
        centers[j] = X[far]
        dist[far, j] = 0.0
        counts[big] -= 1
        counts[j] = 1
    return labels


def kmeans_fit(
    X: np.ndarray,
    k: int,
    rng: np.random.Generator,
    tol: float = KMEANS_TOL,
    max_iter: int = KMEANS_MAX_ITER,
) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeds.

    Stops once the largest L2 center shift is at most ``tol`` or after
    ``max_iter`` updates. The recorded inertia never increases.
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}]")
    centers = X[kmeans_plus_plus(X, k, rng)].copy()
    history: list[float] = []

    def assign():
        dist = cdist(X, centers, "sqeuclidean")
        labels = np.argmin(dist, axis=1)
        labels = _repair_empty(X, labels, centers, dist)
        history.append(float(dist[np.arange(n), labels].sum()))
        return labels

    labels = assign()
    it = 0
    for it in range(1, max_iter + 1):
        new = np.zeros_like(centers)
        np.add.at(new, labels, X)
        new /= np.bincount(labels, minlength=k)[:, None]
        shift = float(np.sqrt(((new - centers) ** 2).sum(axis=1)).max())
        centers = new
        labels = assign()
        if shift <= tol:
            break
    return KMeansResult(labels, centers, it, history)


def kmeans(
    features: np.ndarray,
    k: int,
    rng: np.random.Generator,
    tol: float = KMEANS_TOL,
    max_iter: int = KMEANS_MAX_ITER,
    method: str = "kmeans",
    target_group_size: Optional[int] = None,
    seed: int = 0,
) -> Partition:
    res = kmeans_fit(features, k, rng, tol, max_iter)
    size = target_group_size or math.ceil(len(features) / k)
    return Partition.from_labels(res.labels, method=method, target_group_size=size, seed=seed)


def make_features(ds: Dataset, m: Optional[models.ModelState], mode: str) -> np.ndarray:
    """Whitened per-train-row features for clustering: raw inputs, hidden
    representations, or loss gradients w.r.t. the penultimate activations."""
    if mode == "raw":
        F = ds.X_train
    elif mode == "repr":
        F = models.hidden_repr(m, ds.X_train)
    elif mode == "grad":
        F = models.penult_grad(m, ds.X_train, ds.y_train)
    else:
        raise ValueError(f"unknown feature mode {mode!r}")
    return whiten(F)


def make_partition(
    method: str,
    ds: Dataset,
    group_size: int,
    seed: int,
    model: Optional[models.ModelState] = None,
    tol: float = KMEANS_TOL,
    max_iter: int = KMEANS_MAX_ITER,
) -> Partition:
    """Partition the train split into groups of (roughly) ``group_size``."""
    rng = make_rng(seed)
    n = ds.n_train
    if method == "random":
        return random_partition(n, group_size, rng, seed)
    if method not in FEATURE_MODES:
        raise ValueError(f"unknown grouping method {method!r}; choose from {METHODS}")
    if method != "kmeans" and model is None:
        raise ValueError(f"{method} needs a trained model")
    k = target_size_to_k(n, group_size)
    if k == n:
        # singletons; k-means would reach the same partition via empty-cluster repair
        return Partition([[i] for i in range(n)], method, group_size, seed)
    feats = make_features(ds, model, FEATURE_MODES[method])
    return kmeans(feats, k, rng, tol, max_iter, method=method, target_group_size=group_size, seed=seed)
