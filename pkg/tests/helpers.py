"""Shared fixtures and independent oracles for the test suite."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from ggda import models
from ggda.datahub import make_blobs
from ggda.numkit import make_rng

# deterministic full-batch heavy-ball GD, driven to a gradient-norm tolerance
CONVEX_CFG = models.TrainConfig(
    learning_rate=0.5,
    epochs=200_000,
    batch_size=10**6,
    weight_decay=1e-2,
    momentum=0.9,
    grad_tol=1e-8,
)


@lru_cache(maxsize=None)
def logreg_fixture(seed: int = 0, d: int = 4, classes: int = 4, separation: float = 2.0, n: int = 40):
    """Blobs with 32 train rows and a LogReg trained to its optimum."""
    ds = make_blobs(n, d, classes, separation, make_rng(seed))
    arch = models.Architecture.logreg(d, classes)
    m, ckpts = models.train(arch, ds, CONVEX_CFG)
    return ds, arch, m


@lru_cache(maxsize=None)
def mlp_fixture(seed: int = 0):
    ds = make_blobs(60, 3, 3, 3.0, make_rng(seed))
    arch = models.Architecture.mlp(3, [5, 4], 3)
    cfg = models.TrainConfig(learning_rate=0.05, epochs=20, batch_size=8, weight_decay=1e-3, seed=seed)
    m, ckpts = models.train(arch, ds, cfg, snapshot_every=10)
    return ds, arch, m, ckpts


def gauss_jordan_inverse(A: np.ndarray) -> np.ndarray:
    """Plain Gauss-Jordan elimination with partial pivoting."""
    n = A.shape[0]
    M = np.hstack([np.array(A, dtype=float), np.eye(n)])
    for col in range(n):
        piv = col + int(np.argmax(np.abs(M[col:, col])))
        M[[col, piv]] = M[[piv, col]]
        M[col] /= M[col, col]
        for row in range(n):
            if row != col:
                M[row] -= M[row, col] * M[col]
    return M[:, n:]


def random_spd(n: int, rng: np.random.Generator, cond_floor: float = 0.5) -> np.ndarray:
    Q = rng.standard_normal((n, n))
    return Q @ Q.T + cond_floor * np.eye(n)


def central_diff(f, theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    out = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        out[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return out


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


# blobs with 20% flipped train labels, trained by minibatch GD
STANDARD_CFG = models.TrainConfig(learning_rate=0.05, epochs=30, batch_size=64, weight_decay=1e-3)


@lru_cache(maxsize=None)
def standard_fixture(seed: int = 0):
    from ggda.datahub import flip_labels

    ds0 = make_blobs(1000, 10, 4, 3.0, make_rng(seed))
    ds, record = flip_labels(ds0, 0.2, make_rng(seed + 100))
    arch = models.Architecture.logreg(10, 4)
    return ds, record, arch
