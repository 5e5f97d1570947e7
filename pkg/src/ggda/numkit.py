"""Dense linear algebra, solvers and random projections shared by the package.

Vectors and matrices are plain ``float64`` numpy arrays. Every randomized
routine takes a :class:`numpy.random.Generator` (PCG64), so results are a
deterministic function of the inputs and the seed.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np
from scipy import linalg as sla

from ggda.errors import Divergence, NotSPD

Operator = Callable[..., np.ndarray]

LISSA_BLOWUP = 1e12


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; identical seeds give identical streams everywhere."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed derived from integer parts (e.g. base seed, group, replicate)."""
    ss = np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def solve_spd(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``A x = b`` for symmetric positive-definite ``A`` via Cholesky.

    Raises :class:`NotSPD` when the factorization hits a non-positive pivot.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"A must be square, got shape {A.shape}")
    if b.shape[0] != A.shape[0]:
        raise ValueError(f"dimension mismatch: A is {A.shape}, b is {b.shape}")
    scale = max(1.0, float(np.max(np.abs(A))) if A.size else 1.0)
    if np.max(np.abs(A - A.T), initial=0.0) > 1e-8 * scale:
        raise ValueError("A is not symmetric")
    try:
        factor = sla.cho_factor(A, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise NotSPD(str(exc)) from exc
    return sla.cho_solve(factor, b)


def cg_solve(
    apply_A: Operator,
    b: np.ndarray,
    max_iter: Optional[int] = None,
    tol: float = 1e-8,
) -> tuple[np.ndarray, int]:
    """Conjugate gradient for an SPD operator given only as ``v -> A v``.

    Stops when ``||A x - b|| <= tol * ||b||`` or after ``max_iter`` iterations
    (default: the dimension). Returns the solution and the iterations used.
    """
    b = np.asarray(b, dtype=float)
    if max_iter is None:
        max_iter = b.shape[0]
    x = np.zeros_like(b)
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return x, 0
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    for it in range(1, max_iter + 1):
        Ap = apply_A(p)
        pAp = float(p @ Ap)
        if not np.isfinite(pAp) or pAp <= 0.0:
            if not np.isfinite(pAp):
                raise Divergence("CG curvature became non-finite")
            # operator is not positive definite along p; stop with the current iterate
            return x, it - 1
        alpha = rs / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        rs_new = float(r @ r)
        if not np.isfinite(rs_new):
            raise Divergence("CG residual became non-finite")
        if np.sqrt(rs_new) <= tol * b_norm:
            return x, it
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x, max_iter


def lissa_inverse_hvp(
    apply_H: Operator,
    v: np.ndarray,
    damp: float = 0.001,
    scale: float = 50.0,
    depth: int = 200,
    repeat: int = 20,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Truncated Neumann-series estimate of ``(H + damp I)^{-1} v``.

    Each of the ``repeat`` runs iterates ``r <- v + (I - (H + damp I)/scale) r``
    from ``r = v`` for ``depth`` steps; the runs are averaged and divided by
    ``scale``. When ``rng`` is given, every run gets its own child generator
    and ``apply_H`` is called as ``apply_H(r, child_rng)`` so it can sample a
    minibatch; otherwise ``apply_H(r)``.
    """
    if damp < 0:
        raise ValueError("damp must be non-negative")
    if scale <= 0:
        raise ValueError("scale must be positive")
    v = np.asarray(v, dtype=float)
    children = rng.spawn(repeat) if rng is not None else [None] * repeat
    total = np.zeros_like(v)
    for child in children:
        r = v.copy()
        for _ in range(depth):
            hr = apply_H(r) if child is None else apply_H(r, child)
            r = v + r - (hr + damp * r) / scale
            norm = float(np.linalg.norm(r))
            if not np.isfinite(norm) or norm > LISSA_BLOWUP:
                raise Divergence(
                    "LiSSA iterate blew up; increase scale so that "
                    "(H + damp I)/scale has spectral radius below 1"
                )
        total += r
    return total / (repeat * scale)


def gaussian_projection(p: int, target_dim: int, rng: np.random.Generator) -> np.ndarray:
    """``p x target_dim`` matrix with i.i.d. N(0, 1/target_dim) entries."""
    if not 1 <= target_dim <= p:
        raise ValueError(f"target_dim must be in [1, {p}], got {target_dim}")
    return rng.standard_normal((p, target_dim)) / np.sqrt(target_dim)


def random_projection(
    rows: np.ndarray,
    target_dim: int,
    rng: Optional[np.random.Generator] = None,
    matrix: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Project ``rows`` (``m x p``) to ``target_dim`` columns with a Gaussian sketch.

    Pass ``matrix`` to reuse a previously drawn projection (this is also the
    hook tests use to force the identity).
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if matrix is None:
        if rng is None:
            raise ValueError("either rng or matrix is required")
        matrix = gaussian_projection(rows.shape[1], target_dim, rng)
    if matrix.shape != (rows.shape[1], target_dim):
        raise ValueError(
            f"projection shape {matrix.shape} does not match rows {rows.shape} -> {target_dim}"
        )
    return rows @ matrix


def whiten(X: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Center each column and divide by ``std + eps``; constant columns become zero."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("whiten needs a 2-D array with at least two rows")
    centered = X - X.mean(axis=0)
    std = X.std(axis=0)
    out = centered / (std + eps)
    out[:, np.ptp(X, axis=0) == 0.0] = 0.0
    return out
