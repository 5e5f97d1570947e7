"""Group attribution methods: influence functions, TracIn, TRAK and LOO retraining.

Sign convention: a positive score means removing the group is expected to
*increase* the property ``g``. With ``g`` a test loss, helpful groups score
positive and harmful (e.g. mislabeled) groups negative. Gradient-based scores
omit the global ``1/n`` factor of the first-order expansion, which rescales
every group equally.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from ggda import models, numkit
from ggda.datahub import Dataset, ScoreFile
from ggda.errors import TooLarge
from ggda.grouping import Partition
from ggda.hessians import (
    DEFAULT_FISHER_DAMP,
    FisherAccumulator,
    HessianStrategy,
    ModelContext,
    group_gradients,
    prepare,
)

LOO_MAX_RETRAININGS = 10_000
TRAK_SUBSAMPLE_FRAC = 0.5


@dataclass(frozen=True)
class PropertyFn:
    """Differentiable property of the parameters, evaluated on test rows.

    ``kind`` is ``test_point_loss`` (needs ``index``), ``mean_test_loss`` or
    ``mean_test_loss_subset`` (needs ``indices``). Indices are test positions.
    ``weight`` multiplies the whole property.
    """

    kind: str = "mean_test_loss"
    index: Optional[int] = None
    indices: Optional[tuple[int, ...]] = None
    weight: float = 1.0

    def __post_init__(self):
        if self.kind == "test_point_loss" and self.index is None:
            raise ValueError("test_point_loss needs an index")
        if self.kind == "mean_test_loss_subset" and not self.indices:
            raise ValueError("mean_test_loss_subset needs indices")
        if self.kind not in ("test_point_loss", "mean_test_loss", "mean_test_loss_subset"):
            raise ValueError(f"unknown property {self.kind!r}")
        if self.indices is not None:
            object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))

    @classmethod
    def test_point_loss(cls, index: int) -> "PropertyFn":
        return cls("test_point_loss", index=index)

    @classmethod
    def mean_test_loss(cls) -> "PropertyFn":
        return cls("mean_test_loss")

    def rows(self, ds: Dataset) -> np.ndarray:
        test = ds.test_rows
        if self.kind == "test_point_loss":
            sel = np.array([self.index])
        elif self.kind == "mean_test_loss":
            sel = np.arange(test.size)
        else:
            sel = np.asarray(self.indices)
        if sel.size == 0 or sel.min() < 0 or sel.max() >= test.size:
            raise IndexError(f"property references test positions outside [0, {test.size})")
        return test[sel]

    def describe(self) -> str:
        if self.kind == "test_point_loss":
            return f"test_point_loss[{self.index}]"
        return self.kind


def eval_property(g: PropertyFn, m: models.ModelState, ds: Dataset) -> float:
    rows = g.rows(ds)
    total, _ = models.loss_and_grad(m.arch, m.theta, ds.features[rows], ds.labels[rows])
    return g.weight * total / rows.size


def grad_property(g: PropertyFn, m: models.ModelState, ds: Dataset) -> np.ndarray:
    rows = g.rows(ds)
    models._tick("property")
    _, grad = models.loss_and_grad(m.arch, m.theta, ds.features[rows], ds.labels[rows])
    return g.weight * grad / rows.size


@dataclass
class AttributionScores:
    scores: np.ndarray
    partition: Partition
    method: str
    property: PropertyFn = field(default_factory=PropertyFn)
    seed: int = 0

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        if self.scores.shape != (self.partition.k,):
            raise ValueError(f"{self.scores.shape[0]} scores for {self.partition.k} groups")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("attribution scores must be finite")

    def point_scores(self) -> np.ndarray:
        """Each train position's group score."""
        return self.scores[self.partition.labels()]

    def to_scorefile(self) -> ScoreFile:
        return ScoreFile(
            method=self.method,
            grouping=self.partition.method,
            group_size=self.partition.target_group_size,
            scores=self.scores.tolist(),
            group_members=self.partition.groups,
            seed=self.seed,
        )

    @classmethod
    def from_scorefile(cls, sf: ScoreFile) -> "AttributionScores":
        part = Partition(sf.group_members, sf.grouping, sf.group_size, sf.seed)
        return cls(np.asarray(sf.scores), part, sf.method, seed=sf.seed)


def _fisher_scores(op_project, op_apply, G, grad_g):
    w = op_apply(op_project(grad_g))
    return op_project(G) @ w


def influence(
    m: models.ModelState,
    ds: Dataset,
    part: Partition,
    g: PropertyFn,
    hs: HessianStrategy,
    weight_decay: float = 0.0,
) -> AttributionScores:
    """``score_j = grad g^T H^{-1} grad l(z_j)`` with one inverse applied to ``grad g``.

    Issues exactly ``k`` batched train-gradient passes (plus the per-sample
    passes the plain empirical Fisher needs to build its basis).
    """
    ctx = ModelContext(m, ds, weight_decay)
    G = group_gradients(ctx, part)
    op = prepare(hs, ctx, part, G)
    scores = _fisher_scores(op.project, op.apply, G, grad_property(g, m, ds))
    return AttributionScores(scores, part, f"influence-{hs.kind}", g, hs.seed)


def tracin(
    ckpts: models.Checkpoints | Sequence[models.ModelState],
    ds: Dataset,
    part: Partition,
    g: PropertyFn,
) -> AttributionScores:
    """Identity-Hessian influence summed (unweighted) over checkpoints."""
    states = list(ckpts)
    if not states:
        raise ValueError("tracin needs at least one checkpoint")
    total = np.zeros(part.k)
    for state in states:
        total += influence(state, ds, part, g, HessianStrategy.identity()).scores
    return AttributionScores(total, part, "tracin", g)


def trak_member_subsample(n_train: int, frac: float, seed: int) -> np.ndarray:
    """Sorted train positions drawn for one TRAK ensemble member."""
    n_sub = int(round(frac * n_train))
    if n_sub >= n_train:
        return np.arange(n_train)
    rng = numkit.make_rng(numkit.derive_seed(seed, 0))
    return np.sort(rng.choice(n_train, size=max(n_sub, 1), replace=False))


def trak_member_config(cfg: models.TrainConfig, seed: int) -> models.TrainConfig:
    return replace(cfg, seed=seed)


def trak(
    arch: models.Architecture,
    ds: Dataset,
    part: Partition,
    g: PropertyFn,
    cfg: models.TrainConfig,
    M: int = 10,
    subsample_frac: float = TRAK_SUBSAMPLE_FRAC,
    proj_dim: Optional[int] = None,
    seed: int = 0,
    member_seeds: Optional[Sequence[int]] = None,
    damp: float = DEFAULT_FISHER_DAMP,
    projection: Optional[np.ndarray] = None,
) -> AttributionScores:
    """Mean over ``M`` models trained on subsamples of batched-Fisher influence.

    Member ``i`` uses seed ``member_seeds[i]`` (derived from ``seed`` when not
    given) for its subsample, its training run and its projection matrix,
    which is redrawn per member. Group gradients only include the member's
    sampled rows; groups with none of them contribute a zero row.
    """
    if M < 1:
        raise ValueError("M must be at least 1")
    if not 0 < subsample_frac <= 1:
        raise ValueError("subsample_frac must lie in (0, 1]")
    if member_seeds is None:
        member_seeds = [numkit.derive_seed(seed, i) for i in range(M)]
    if len(member_seeds) != M:
        raise ValueError("need exactly M member seeds")
    n = ds.n_train
    total = np.zeros(part.k)
    for s in member_seeds:
        sub = trak_member_subsample(n, subsample_frac, s)
        ds_sub = ds.keep_train(sub) if sub.size < n else ds
        m, _ = models.train(arch, ds_sub, trak_member_config(cfg, s))
        where = np.full(n, -1, dtype=np.int64)
        where[sub] = np.arange(sub.size)
        G = np.stack(
            [models.grad_group(m, ds_sub, where[grp][where[grp] >= 0]) for grp in part.groups]
        )
        P = projection
        if P is None and proj_dim is not None:
            P = numkit.gaussian_projection(m.p, proj_dim, numkit.make_rng(numkit.derive_seed(s, 1)))
        fisher = FisherAccumulator(G if P is None else G @ P, damp, P)
        total += _fisher_scores(fisher.project, fisher.solve, G, grad_property(g, m, ds))
    return AttributionScores(total / M, part, "trak", g, seed)


def loo_seeds(base_seed: int, num_seeds: int) -> list[int]:
    return [numkit.derive_seed(base_seed, r) for r in range(num_seeds)]


def loo_oracle(
    arch: models.Architecture,
    ds: Dataset,
    part: Partition,
    g: PropertyFn,
    cfg: models.TrainConfig,
    num_seeds: int = 1,
) -> AttributionScores:
    """Retraining ground truth: ``g(train without z_j) - g(train on everything)``.

    Replicate ``r`` trains both the full model and every group-removed model
    with the same seed, so seed noise cancels in each difference.
    """
    if part.k * num_seeds > LOO_MAX_RETRAININGS:
        raise TooLarge(f"{part.k} groups x {num_seeds} seeds exceeds {LOO_MAX_RETRAININGS} retrainings")
    scores = np.zeros(part.k)
    for s in loo_seeds(cfg.seed, num_seeds):
        run_cfg = replace(cfg, seed=s)
        full, _ = models.train(arch, ds, run_cfg)
        base = eval_property(g, full, ds)
        for j, grp in enumerate(part.groups):
            reduced, _ = models.train(arch, ds.drop_train(grp), run_cfg)
            scores[j] += eval_property(g, reduced, ds) - base
    return AttributionScores(scores / num_seeds, part, "loo", g, cfg.seed)
