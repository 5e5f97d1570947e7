"""Run configuration for the command-line pipeline (one JSON file)."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ggda import evalkit, grouping
from ggda.errors import ConfigError

OUTPUT_ENV = "GGDA_OUTPUT_DIR"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SyntheticSpec(_Strict):
    n: int = Field(1000, ge=2)
    d: int = Field(2, ge=1)
    classes: int = Field(2, ge=1)
    separation: float = Field(2.0, ge=0)


class DatasetSpec(_Strict):
    path: Optional[str] = None
    label_column: str = "label"
    synthetic: Optional[SyntheticSpec] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.path is None) == (self.synthetic is None):
            raise ValueError("give exactly one of 'path' or 'synthetic'")
        return self


class ArchSpec(_Strict):
    kind: Literal["logreg", "mlp"] = "logreg"
    hidden: list[int] = Field(default_factory=list)

    @model_validator(mode="after")
    def _hidden(self):
        if self.kind == "mlp" and not self.hidden:
            raise ValueError("mlp needs at least one hidden layer size")
        if self.kind == "logreg" and self.hidden:
            raise ValueError("logreg takes no hidden layers")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden sizes must be positive")
        return self


class TrainSpec(_Strict):
    learning_rate: float = Field(0.05, gt=0)
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(64, ge=1)
    weight_decay: float = Field(1e-3, ge=0)
    momentum: float = Field(0.0, ge=0, lt=1)
    grad_tol: Optional[float] = Field(None, gt=0)
    snapshot_every: Optional[int] = Field(None, ge=1)


class GroupingSpec(_Strict):
    method: Literal["random", "kmeans", "repr_kmeans", "grad_kmeans"] = "grad_kmeans"
    group_size: int = Field(16, ge=1)
    tol: float = Field(grouping.KMEANS_TOL, gt=0)
    max_iter: int = Field(grouping.KMEANS_MAX_ITER, ge=1)


class HessianSpec(_Strict):
    kind: Literal["identity", "exact", "cg", "lissa", "emp_fisher", "batched_emp_fisher"] = "identity"
    damp: Optional[float] = Field(None, ge=0)
    tol: float = Field(1e-8, gt=0)
    max_iter: Optional[int] = Field(None, ge=1)
    scale: float = Field(50.0, gt=0)
    depth: int = Field(200, ge=1)
    repeat: int = Field(20, ge=1)
    batch_size: Optional[int] = Field(None, ge=1)
    proj_dim: Optional[int] = Field(None, ge=1)


class PropertySpec(_Strict):
    kind: Literal["test_point_loss", "mean_test_loss", "mean_test_loss_subset"] = "mean_test_loss"
    index: Optional[int] = Field(None, ge=0)
    indices: Optional[list[int]] = None


class TrakSpec(_Strict):
    M: int = Field(10, ge=1)
    subsample_frac: float = Field(0.5, gt=0, le=1)
    proj_dim: Optional[int] = Field(None, ge=1)


class AttributionSpec(_Strict):
    method: Literal["influence", "tracin", "trak", "loo"] = "tracin"
    hessian: HessianSpec = Field(default_factory=HessianSpec)
    property: PropertySpec = Field(default_factory=PropertySpec)
    trak: TrakSpec = Field(default_factory=TrakSpec)
    loo_seeds: int = Field(1, ge=1)


class EvalSpec(_Strict):
    fractions: list[float] = Field(default_factory=lambda: list(evalkit.RETRAIN_FRACTIONS))
    prune_fractions: list[float] = Field(default_factory=lambda: list(evalkit.PRUNE_FRACTIONS))
    n_seeds: int = Field(10, ge=1)
    flip_fraction: float = Field(0.0, ge=0, lt=1)

    @model_validator(mode="after")
    def _fractions(self):
        for name in ("fractions", "prune_fractions"):
            for f in getattr(self, name):
                if not 0 < f < 1:
                    raise ValueError(f"{name} entries must lie in (0, 1), got {f}")
        return self


class BenchSpec(_Strict):
    method: Literal["tracin", "influence"] = "tracin"
    group_sizes: list[int] = Field(default_factory=lambda: [1, 4, 16, 64])
    reps: int = Field(3, ge=1)

    @model_validator(mode="after")
    def _has_one(self):
        if 1 not in self.group_sizes:
            raise ValueError("group_sizes must include 1")
        return self


class RunConfig(_Strict):
    seed: int = 0
    dataset: DatasetSpec
    arch: ArchSpec = Field(default_factory=ArchSpec)
    train: TrainSpec = Field(default_factory=TrainSpec)
    grouping: GroupingSpec = Field(default_factory=GroupingSpec)
    attribution: AttributionSpec = Field(default_factory=AttributionSpec)
    eval: EvalSpec = Field(default_factory=EvalSpec)
    bench: BenchSpec = Field(default_factory=BenchSpec)
    output_dir: str = "out"


def _loc(err: dict) -> str:
    return ".".join(str(p) for p in err["loc"]) or "<root>"


def parse_config(obj: dict, base_dir: Path | str = ".") -> RunConfig:
    try:
        cfg = RunConfig.model_validate(obj)
    except ValidationError as exc:
        first = exc.errors()[0]
        raise ConfigError(_loc(first), first["msg"]) from exc
    if cfg.dataset.path is not None:
        p = Path(cfg.dataset.path)
        if not p.is_absolute():
            p = Path(base_dir) / p
        if not p.is_file():
            raise ConfigError("dataset.path", f"file not found: {p}")
        cfg.dataset.path = str(p)
    return cfg


def load_config(path: str | os.PathLike, out: Optional[str] = None, seed: Optional[int] = None) -> RunConfig:
    """Read and validate a config file; ``out``/``seed`` and ``$GGDA_OUTPUT_DIR`` override it."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("<config>", f"cannot read {path}: {exc.strerror}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<config>", f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    cfg = parse_config(obj, path.parent)
    if os.environ.get(OUTPUT_ENV):
        cfg.output_dir = os.environ[OUTPUT_ENV]
    if out is not None:
        cfg.output_dir = out
    if seed is not None:
        cfg.seed = seed
    return cfg
