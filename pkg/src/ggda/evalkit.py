"""Evaluation protocols: retraining score, dataset pruning, noisy-label AUC, runtime benchmark."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from ggda import models, numkit
from ggda.attributors import AttributionScores, PropertyFn, influence, tracin
from ggda.datahub import CorruptionRecord, Dataset
from ggda.grouping import random_partition
from ggda.hessians import HessianStrategy

TOP_FIRST = "top"
BOTTOM_FIRST = "bottom"

RETRAIN_FRACTIONS = (0.01, 0.05, 0.10, 0.20)
PRUNE_FRACTIONS = (0.25, 0.50, 0.75)


@dataclass
class RemovalPlan:
    group_order: list[int]
    fraction: float
    indices: np.ndarray
    direction: str = TOP_FIRST
    sampled_from: Optional[int] = None


def removal_budget(n: int, fraction: float) -> int:
    return int(round(fraction * n))


def build_removal_plan(
    scores: AttributionScores,
    fraction: float,
    direction: str = TOP_FIRST,
    rng: Optional[np.random.Generator] = None,
) -> RemovalPlan:
    """Take whole groups in score order until the point budget, then sample the
    remainder uniformly from the next group. Ties go to the lower group id."""
    if not 0 <= fraction < 1:
        raise ValueError("fraction must lie in [0, 1)")
    part = scores.partition
    ids = np.arange(part.k)
    if direction == TOP_FIRST:
        order = np.lexsort((ids, -scores.scores))
    elif direction == BOTTOM_FIRST:
        order = np.lexsort((ids, scores.scores))
    else:
        raise ValueError(f"direction must be {TOP_FIRST!r} or {BOTTOM_FIRST!r}")
    budget = removal_budget(part.n, fraction)
    taken: list[int] = []
    used: list[int] = []
    sampled_from = None
    for j in order:
        if len(taken) == budget:
            break
        members = part.groups[j]
        room = budget - len(taken)
        if len(members) <= room:
            taken.extend(members)
        else:
            if rng is None:
                raise ValueError("a partial group needs an rng to sample from")
            taken.extend(int(i) for i in rng.choice(members, size=room, replace=False))
            sampled_from = int(j)
        used.append(int(j))
    return RemovalPlan(used, fraction, np.sort(np.asarray(taken, dtype=np.int64)), direction, sampled_from)


def random_removal_plan(n_train: int, fraction: float, rng: np.random.Generator) -> RemovalPlan:
    idx = np.sort(rng.choice(n_train, size=removal_budget(n_train, fraction), replace=False))
    return RemovalPlan([], fraction, idx, "random")


@dataclass
class EvalRow:
    fraction: float
    mean: float
    stderr: float
    n_seeds: int
    runtime_s: float = 0.0
    values: list[float] = field(default_factory=list)


@dataclass
class EvalReport:
    metric: str
    baseline: Optional[EvalRow]
    rows: list[EvalRow]
    seeds: list[int]

    def to_json(self) -> dict:
        def row(r: EvalRow) -> dict:
            return {
                "fraction": r.fraction,
                "mean": r.mean,
                "stderr": r.stderr,
                "n_seeds": r.n_seeds,
                "values": r.values,
                "runtime_s": r.runtime_s,
            }

        return {
            "metric": self.metric,
            "baseline": None if self.baseline is None else row(self.baseline),
            "values": [row(r) for r in self.rows],
            "seeds": self.seeds,
        }

    def csv_rows(self) -> list[list]:
        out = []
        for r in ([self.baseline] if self.baseline else []) + self.rows:
            out.append([self.metric, r.fraction, r.mean, r.stderr, r.n_seeds, r.runtime_s])
        return out

    CSV_HEADER = ("metric", "fraction", "mean", "stderr", "n_seeds", "runtime_s")

    def row_for(self, fraction: float) -> EvalRow:
        for r in self.rows:
            if abs(r.fraction - fraction) < 1e-12:
                return r
        raise KeyError(fraction)


def _summary(fraction: float, values: Sequence[float], runtime: float) -> EvalRow:
    vals = [float(v) for v in values]
    mean = float(np.mean(vals))
    stderr = float(np.std(vals, ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return EvalRow(fraction, mean, stderr, len(vals), runtime, vals)


def retrain_seeds(cfg: models.TrainConfig, n_seeds: int) -> list[int]:
    return [numkit.derive_seed(cfg.seed, 7919, s) for s in range(n_seeds)]


def _accuracies(arch, ds: Dataset, cfg, seeds, remove: np.ndarray) -> tuple[list[float], float]:
    t0 = time.perf_counter()
    reduced = ds.drop_train(remove) if len(remove) else ds
    accs = []
    for s in seeds:
        m, _ = models.train(arch, reduced, replace(cfg, seed=s))
        accs.append(models.test_accuracy(m, ds))
    return accs, time.perf_counter() - t0


def retraining_score(
    plan: RemovalPlan,
    arch: models.Architecture,
    ds: Dataset,
    cfg: models.TrainConfig,
    n_seeds: int = 10,
    metric: str = "retrain",
) -> EvalReport:
    """Test accuracy after retraining without the plan's points, vs the full-data baseline.

    Both arms use the same seed list. For top-first plans lower is better.
    """
    seeds = retrain_seeds(cfg, n_seeds)
    base, t_base = _accuracies(arch, ds, cfg, seeds, np.array([], dtype=np.int64))
    accs, t = _accuracies(arch, ds, cfg, seeds, plan.indices)
    return EvalReport(metric, _summary(0.0, base, t_base), [_summary(plan.fraction, accs, t)], seeds)


def removal_curve(
    scores: AttributionScores,
    arch: models.Architecture,
    ds: Dataset,
    cfg: models.TrainConfig,
    fractions: Sequence[float],
    n_seeds: int,
    direction: str,
    seed: int = 0,
    metric: Optional[str] = None,
) -> EvalReport:
    seeds = retrain_seeds(cfg, n_seeds)
    base, t_base = _accuracies(arch, ds, cfg, seeds, np.array([], dtype=np.int64))
    rows = []
    for i, f in enumerate(fractions):
        plan = build_removal_plan(scores, f, direction, numkit.make_rng(numkit.derive_seed(seed, i)))
        accs, t = _accuracies(arch, ds, cfg, seeds, plan.indices)
        rows.append(_summary(f, accs, t))
    name = metric or ("retrain" if direction == TOP_FIRST else "prune")
    return EvalReport(name, _summary(0.0, base, t_base), rows, seeds)


def pruning_eval(
    scores: AttributionScores,
    arch: models.Architecture,
    ds: Dataset,
    cfg: models.TrainConfig,
    fractions: Sequence[float] = PRUNE_FRACTIONS,
    n_seeds: int = 10,
    seed: int = 0,
) -> EvalReport:
    """Drop the lowest-scored points at each fraction and retrain; higher accuracy is better."""
    return removal_curve(scores, arch, ds, cfg, fractions, n_seeds, BOTTOM_FIRST, seed, "prune")


def noisy_label_auc(scores: AttributionScores | np.ndarray, corruption: CorruptionRecord) -> float:
    """Area under detected-flips vs checked-fraction when auditing lowest scores first.

    Points inherit their group's score; ties are broken by ascending index.
    The curve starts at (0, 0) and advances one point at a time.
    """
    point = scores.point_scores() if isinstance(scores, AttributionScores) else np.asarray(scores, dtype=float)
    n = point.size
    flipped = np.zeros(n, dtype=bool)
    flipped[list(corruption.flipped_indices)] = True
    total = int(flipped.sum())
    if total == 0:
        raise ValueError("corruption record has no flipped points")
    order = np.lexsort((np.arange(n), point))
    y = np.concatenate([[0.0], np.cumsum(flipped[order]) / total])
    x = np.arange(n + 1) / n
    return float(np.trapezoid(y, x))


@dataclass
class BenchRow:
    group_size: int
    median_s: float
    passes: int
    speedup: float
    pass_ratio: float


def bench_da_vs_ggda(
    method: str,
    ds: Dataset,
    model: models.ModelState,
    group_sizes: Sequence[int],
    reps: int = 3,
    g: Optional[PropertyFn] = None,
    hs: Optional[HessianStrategy] = None,
    weight_decay: float = 0.0,
    seed: int = 0,
) -> list[BenchRow]:
    """Wall-clock (median of ``reps``) and gradient-pass counts per group size.

    ``method`` is ``tracin`` or ``influence`` (with ``hs``, identity by
    default). Partitions are random and built outside the timed region.
    """
    if 1 not in group_sizes:
        raise ValueError("group_sizes must include 1 (the per-point baseline)")
    g = g or PropertyFn.mean_test_loss()
    hs = hs or HessianStrategy.identity()
    if method == "tracin":
        run = lambda part: tracin([model], ds, part, g)  # noqa: E731
    elif method == "influence":
        run = lambda part: influence(model, ds, part, g, hs, weight_decay)  # noqa: E731
    else:
        raise ValueError(f"cannot benchmark method {method!r}")
    timings: dict[int, float] = {}
    passes: dict[int, int] = {}
    for size in group_sizes:
        part = random_partition(ds.n_train, size, numkit.make_rng(numkit.derive_seed(seed, size)))
        times = []
        for r in range(reps):
            with models.count_passes() as counter:
                t0 = time.perf_counter()
                run(part)
                times.append(time.perf_counter() - t0)
            if r == 0:
                passes[size] = counter.grad
        timings[size] = statistics.median(times)
    base_t, base_p = timings[1], passes[1]
    return [
        BenchRow(s, timings[s], passes[s], base_t / timings[s], base_p / passes[s]) for s in group_sizes
    ]


BENCH_HEADER = ("group_size", "median_s", "passes", "speedup")
