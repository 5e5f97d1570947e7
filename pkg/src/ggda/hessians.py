"""Inverse-Hessian strategies ``v -> H^{-1} v`` used by the influence attributors.

Strategies: identity, exact (dense Cholesky), conjugate gradient and LiSSA
against exact HVPs, and (optionally projected) empirical Fisher built from
per-sample or per-group summed loss gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from ggda import models, numkit
from ggda.datahub import Dataset
from ggda.errors import NotSPD
from ggda.grouping import Partition

KINDS = ("identity", "exact", "cg", "lissa", "emp_fisher", "batched_emp_fisher")

DEFAULT_FISHER_DAMP = 1e-3
DEFAULT_EXACT_FALLBACK_DAMP = 1e-3


@dataclass(frozen=True, eq=False)
class HessianStrategy:
    """Named recipe for approximating ``H^{-1} v``.

    Only the fields relevant to ``kind`` are used. ``projection`` overrides the
    Gaussian sketch drawn from ``seed`` (handy for forcing the identity).
    """

    kind: str = "identity"
    damp: float = 0.0
    fallback_damp: float = DEFAULT_EXACT_FALLBACK_DAMP
    tol: float = 1e-8
    max_iter: Optional[int] = None
    scale: float = 50.0
    depth: int = 200
    repeat: int = 20
    batch_size: Optional[int] = None
    proj_dim: Optional[int] = None
    projection: Optional[np.ndarray] = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown Hessian strategy {self.kind!r}; choose from {KINDS}")
        if self.damp < 0 or self.fallback_damp < 0:
            raise ValueError("damping must be non-negative")
        if self.scale <= 0 or self.depth < 1 or self.repeat < 1:
            raise ValueError("LiSSA needs scale > 0, depth >= 1, repeat >= 1")
        if self.proj_dim is not None and self.proj_dim < 1:
            raise ValueError("proj_dim must be positive")

    @classmethod
    def identity(cls) -> "HessianStrategy":
        return cls("identity")

    @classmethod
    def exact(cls, damp: float = 0.0, fallback_damp: float = DEFAULT_EXACT_FALLBACK_DAMP) -> "HessianStrategy":
        return cls("exact", damp=damp, fallback_damp=fallback_damp)

    @classmethod
    def cg(cls, tol: float = 1e-8, max_iter: Optional[int] = None, damp: float = 0.0) -> "HessianStrategy":
        return cls("cg", tol=tol, max_iter=max_iter, damp=damp)

    @classmethod
    def lissa(
        cls,
        damp: float = 0.001,
        scale: float = 50.0,
        depth: int = 200,
        repeat: int = 20,
        batch_size: Optional[int] = None,
        seed: int = 0,
    ) -> "HessianStrategy":
        return cls("lissa", damp=damp, scale=scale, depth=depth, repeat=repeat, batch_size=batch_size, seed=seed)

    @classmethod
    def emp_fisher(cls, proj_dim=None, damp=DEFAULT_FISHER_DAMP, seed=0, projection=None) -> "HessianStrategy":
        return cls("emp_fisher", damp=damp, proj_dim=proj_dim, seed=seed, projection=projection)

    @classmethod
    def batched_emp_fisher(cls, proj_dim=None, damp=DEFAULT_FISHER_DAMP, seed=0, projection=None) -> "HessianStrategy":
        return cls("batched_emp_fisher", damp=damp, proj_dim=proj_dim, seed=seed, projection=projection)

    @property
    def is_fisher(self) -> bool:
        return self.kind in ("emp_fisher", "batched_emp_fisher")

    @property
    def is_fixed(self) -> bool:
        """True when the operator is one fixed linear map for the whole attribution."""
        return self.kind in ("identity", "exact", "emp_fisher", "batched_emp_fisher")


@dataclass(frozen=True)
class ModelContext:
    """A trained model together with the data and regularization defining its Hessian."""

    model: models.ModelState
    ds: Dataset
    weight_decay: float = 0.0


@dataclass
class FisherAccumulator:
    """Rows of (possibly projected) loss gradients; ``F = basis^T basis``."""

    basis: np.ndarray
    damp: float = DEFAULT_FISHER_DAMP
    projection: Optional[np.ndarray] = None

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    def matrix(self) -> np.ndarray:
        return self.basis.T @ self.basis

    def project(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        return v if self.projection is None else v @ self.projection

    def solve(self, v: np.ndarray) -> np.ndarray:
        """``(F + damp I)^{-1} v`` for ``v`` already in the (projected) basis space."""
        A = self.matrix()
        A[np.diag_indices_from(A)] += self.damp
        return numkit.solve_spd(A, v)


def projection_for(strategy: HessianStrategy, p: int) -> Optional[np.ndarray]:
    if strategy.projection is not None:
        return np.asarray(strategy.projection, dtype=float)
    if strategy.proj_dim is None:
        return None
    return numkit.gaussian_projection(p, strategy.proj_dim, numkit.make_rng(strategy.seed))


def group_gradients(ctx: ModelContext, partition: Partition) -> np.ndarray:
    """``k x p`` matrix of summed-loss gradients, one batched pass per group."""
    return np.stack([models.grad_group(ctx.model, ctx.ds, g) for g in partition.groups])


def build_fisher(
    ctx: ModelContext,
    partition: Optional[Partition] = None,
    proj_dim: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    damp: float = DEFAULT_FISHER_DAMP,
    projection: Optional[np.ndarray] = None,
    grads: Optional[np.ndarray] = None,
) -> FisherAccumulator:
    """Batched empirical Fisher over the partition's groups.

    ``partition=None`` means singletons, i.e. the ordinary empirical Fisher.
    Precomputed group gradients may be passed as ``grads`` to avoid a second
    round of backward passes.
    """
    if partition is None:
        partition = Partition.singletons(ctx.ds.n_train)
    if grads is None:
        grads = group_gradients(ctx, partition)
    if projection is None and proj_dim is not None:
        if rng is None:
            raise ValueError("a projection dimension needs an rng")
        projection = numkit.gaussian_projection(grads.shape[1], proj_dim, rng)
    basis = grads if projection is None else grads @ projection
    return FisherAccumulator(basis, damp, projection)


class InverseOperator:
    """A strategy bound to a model: ``project`` maps gradients into the working
    space and ``apply`` multiplies by the inverse there."""

    def __init__(self, strategy: HessianStrategy, ctx: ModelContext, fisher: Optional[FisherAccumulator] = None):
        self.strategy = strategy
        self.ctx = ctx
        self.fisher = fisher
        self._H: Optional[np.ndarray] = None
        self._H_damp = strategy.damp

    def project(self, v: np.ndarray) -> np.ndarray:
        return self.fisher.project(v) if self.fisher is not None else np.asarray(v, dtype=float)

    def _hvp(self, v, rng=None):
        ctx = self.ctx
        indices = None
        if rng is not None and self.strategy.batch_size and self.strategy.batch_size < ctx.ds.n_train:
            indices = rng.choice(ctx.ds.n_train, size=self.strategy.batch_size, replace=False)
        return models.hvp(ctx.model, ctx.ds, v, indices=indices, weight_decay=ctx.weight_decay)

    def _exact_solve(self, v):
        if self._H is None:
            self._H = models.exact_hessian(self.ctx.model, self.ctx.ds, self.ctx.weight_decay)
            self._H[np.diag_indices_from(self._H)] += self.strategy.damp
            try:
                numkit.solve_spd(self._H, np.zeros(self._H.shape[0]))
            except NotSPD:
                self._H[np.diag_indices_from(self._H)] += self.strategy.fallback_damp
                self._H_damp += self.strategy.fallback_damp
        return numkit.solve_spd(self._H, v)

    def apply(self, v: np.ndarray) -> np.ndarray:
        s = self.strategy
        v = np.asarray(v, dtype=float)
        if s.kind == "identity":
            return v.copy()
        if s.kind == "exact":
            return self._exact_solve(v)
        if s.kind == "cg":
            x, _ = numkit.cg_solve(lambda u: self._hvp(u) + s.damp * u, v, s.max_iter, s.tol)
            return x
        if s.kind == "lissa":
            rng = numkit.make_rng(s.seed) if s.batch_size else None
            return numkit.lissa_inverse_hvp(self._hvp, v, s.damp, s.scale, s.depth, s.repeat, rng)
        if self.fisher is None:
            raise ValueError("Fisher strategies need a FisherAccumulator; use prepare()")
        return self.fisher.solve(v)


def prepare(
    strategy: HessianStrategy,
    ctx: ModelContext,
    partition: Optional[Partition] = None,
    group_grads: Optional[np.ndarray] = None,
) -> InverseOperator:
    """Bind ``strategy`` to a model, building the Fisher basis when needed.

    For ``batched_emp_fisher`` the Fisher is built over ``partition`` and the
    already computed ``group_grads`` are reused; ``emp_fisher`` always uses
    per-sample gradients.
    """
    fisher = None
    if strategy.is_fisher:
        projection = projection_for(strategy, ctx.model.p)
        if strategy.kind == "batched_emp_fisher" and partition is not None:
            fisher = build_fisher(ctx, partition, damp=strategy.damp, projection=projection, grads=group_grads)
        elif strategy.kind == "batched_emp_fisher" and group_grads is not None:
            raise ValueError("group gradients given without their partition")
        else:
            fisher = build_fisher(ctx, None, damp=strategy.damp, projection=projection)
    return InverseOperator(strategy, ctx, fisher)


def apply_inverse(
    strategy: HessianStrategy,
    ctx: ModelContext,
    v: np.ndarray,
    partition: Optional[Partition] = None,
) -> np.ndarray:
    """One-shot ``H^{-1} v``. For Fisher strategies ``v`` may be a full gradient
    (it is projected first) or already live in the projected space."""
    op = prepare(strategy, ctx, partition)
    v = np.asarray(v, dtype=float)
    if op.fisher is not None and op.fisher.projection is not None and v.shape[0] == ctx.model.p:
        v = op.project(v)
    return op.apply(v)


# ---------------------------------------------------------------- TRAK <-> Fisher


def log_c_of_t(margin: np.ndarray, T: float) -> np.ndarray:
    """``log C(T)`` with ``C(T) = exp(-2m/T) / ((1 + exp(-m/T))^2 T^2)``, ``m = y f``."""
    u = -np.asarray(margin, dtype=float) / T
    return 2.0 * u - 2.0 * np.logaddexp(0.0, u) - 2.0 * np.log(T)


@dataclass
class EquivalenceReport:
    temperature: float
    n_points: int
    max_deviation: float
    worst_c_times_4t2_error: float
    deviations: np.ndarray


def trak_fisher_equivalence_check(
    m: models.ModelState,
    X: np.ndarray,
    y_pm: np.ndarray,
    T: float,
) -> EquivalenceReport:
    """Check ``grad l grad l^T = C(T) grad f grad f^T`` on binary points.

    ``f`` is the logit margin ``z_1 - z_0`` of a two-class model and the loss
    is ``log(1 + exp(-y f / T))`` with ``y`` in {+1, -1}. The loss gradient is
    obtained by backpropagating the tempered softmax cross-entropy, the
    coefficient ``C(T)`` from its closed form. Per point, the deviation is the
    largest entry of ``|A - C B|`` divided by the largest entry of ``|A|``.
    """
    if m.arch.n_classes != 2:
        raise ValueError("the TRAK/Fisher identity is stated for binary classifiers")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y_pm = np.asarray(y_pm)
    if not np.all(np.isin(y_pm, (-1, 1))):
        raise ValueError("labels must be +1/-1")
    devs, c_err = [], []
    for x, y in zip(X, y_pm):
        z = models.logits(m, x)[0]
        f = z[1] - z[0]
        cls = 1 if y > 0 else 0
        # d loss / d z_c for softmax(z / T), computed without 1 - s cancellation
        s_other = expit((z[1 - cls] - z[cls]) / T)
        delta = np.empty(2)
        delta[cls] = -s_other / T
        delta[1 - cls] = s_other / T
        g_loss = models.output_grad(m, x, delta)
        g_f = models.output_grad(m, x, np.array([-1.0, 1.0]))
        C = np.exp(log_c_of_t(y * f, T))
        A = np.outer(g_loss, g_loss)
        B = np.outer(g_f, g_f)
        scale = np.max(np.abs(A))
        devs.append(0.0 if scale == 0 else float(np.max(np.abs(A - C * B)) / scale))
        c_err.append(abs(C * 4.0 * T * T - 1.0))
    devs = np.asarray(devs)
    return EquivalenceReport(T, len(devs), float(devs.max(initial=0.0)), float(max(c_err, default=0.0)), devs)
