"""Datasets, label corruption and score/partition persistence.

Row indices used throughout the package (partitions, corruption records,
removal plans) are *train positions*: ``0 .. n_train - 1`` in the order the
train rows appear in the dataset.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from ggda.errors import MissingColumn, ParseError, SchemaError

SPLIT_COLUMN = "split"


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    is_train: np.ndarray
    n_classes: int
    name: str = "dataset"
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels, dtype=np.int64)
        mask = np.asarray(self.is_train, dtype=bool)
        if X.ndim != 2:
            raise ValueError("features must be 2-D")
        if y.shape != (X.shape[0],) or mask.shape != (X.shape[0],):
            raise ValueError("labels/split must have one entry per feature row")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        names = self.feature_names or tuple(f"x{j}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise ValueError("feature_names length does not match feature columns")
        for arr in (X, y, mask):
            arr.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "is_train", mask)
        object.__setattr__(self, "feature_names", tuple(names))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def train_rows(self) -> np.ndarray:
        return np.flatnonzero(self.is_train)

    @property
    def test_rows(self) -> np.ndarray:
        return np.flatnonzero(~self.is_train)

    @property
    def n_train(self) -> int:
        return int(self.is_train.sum())

    @property
    def n_test(self) -> int:
        return self.n - self.n_train

    @property
    def X_train(self) -> np.ndarray:
        return self.features[self.is_train]

    @property
    def y_train(self) -> np.ndarray:
        return self.labels[self.is_train]

    @property
    def X_test(self) -> np.ndarray:
        return self.features[~self.is_train]

    @property
    def y_test(self) -> np.ndarray:
        return self.labels[~self.is_train]

    def with_train_labels(self, y_train: np.ndarray) -> "Dataset":
        labels = self.labels.copy()
        labels[self.is_train] = y_train
        return Dataset(self.features, labels, self.is_train, self.n_classes, self.name, self.feature_names)

    def keep_train(self, positions: Iterable[int]) -> "Dataset":
        """Dataset with only the given train positions (in ascending order) and every test row."""
        keep = np.zeros(self.n_train, dtype=bool)
        keep[np.asarray(list(positions), dtype=np.int64)] = True
        rows = np.concatenate([self.train_rows[keep], self.test_rows])
        rows.sort()
        return Dataset(
            self.features[rows],
            self.labels[rows],
            self.is_train[rows],
            self.n_classes,
            self.name,
            self.feature_names,
        )

    def drop_train(self, positions: Iterable[int]) -> "Dataset":
        drop = np.zeros(self.n_train, dtype=bool)
        drop[np.asarray(list(positions), dtype=np.int64)] = True
        return self.keep_train(np.flatnonzero(~drop))


@dataclass(frozen=True)
class CorruptionRecord:
    flipped_indices: tuple[int, ...]
    original_labels: tuple[int, ...]
    fraction: float

    def to_json(self) -> dict:
        return {
            "fraction": self.fraction,
            "flipped_indices": list(self.flipped_indices),
            "original_labels": list(self.original_labels),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CorruptionRecord":
        try:
            flipped = tuple(int(i) for i in obj["flipped_indices"])
            original = tuple(int(i) for i in obj["original_labels"])
            fraction = float(obj["fraction"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad corruption record: {exc}") from exc
        if len(flipped) != len(original):
            raise SchemaError("flipped_indices and original_labels differ in length")
        return cls(flipped, original, fraction)


@dataclass
class ScoreFile:
    method: str
    grouping: str
    group_size: int
    scores: list[float]
    group_members: list[list[int]]
    seed: int = 0

    def __post_init__(self):
        validate_groups(self.group_members)
        if len(self.scores) != len(self.group_members):
            raise SchemaError(
                f"{len(self.scores)} scores for {len(self.group_members)} groups"
            )
        self.scores = [float(s) for s in self.scores]
        self.group_members = [[int(i) for i in g] for g in self.group_members]

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "grouping": self.grouping,
            "group_size": self.group_size,
            "seed": self.seed,
            "groups": [
                {"id": j, "members": members, "score": score}
                for j, (members, score) in enumerate(zip(self.group_members, self.scores))
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ScoreFile":
        try:
            groups = obj["groups"]
            if not isinstance(groups, list):
                raise SchemaError("groups must be a list")
            scores, members = [], []
            for j, g in enumerate(groups):
                if g.get("id") != j:
                    raise SchemaError(f"group ids must be 0..k-1 in order (saw {g.get('id')} at {j})")
                members.append(g["members"])
                if "score" in g:
                    scores.append(g["score"])
            return cls(
                method=str(obj["method"]),
                grouping=str(obj["grouping"]),
                group_size=int(obj["group_size"]),
                scores=scores,
                group_members=members,
                seed=int(obj["seed"]),
            )
        except (KeyError, TypeError, AttributeError) as exc:
            raise SchemaError(f"malformed score file: {exc!r}") from exc

    def __eq__(self, other):
        if not isinstance(other, ScoreFile):
            return NotImplemented
        return self.to_json() == other.to_json()


def validate_groups(groups: Sequence[Sequence[int]], n: Optional[int] = None) -> int:
    """Check that ``groups`` is a partition of ``range(n)`` into nonempty parts; returns n."""
    if len(groups) == 0:
        raise SchemaError("at least one group is required")
    seen: set[int] = set()
    total = 0
    for j, g in enumerate(groups):
        if len(g) == 0:
            raise SchemaError(f"group {j} is empty")
        total += len(g)
        seen.update(int(i) for i in g)
    if len(seen) != total:
        raise SchemaError("groups overlap")
    n = total if n is None else n
    if seen != set(range(n)):
        raise SchemaError(f"groups do not cover train positions 0..{n - 1}")
    return n


# ---------------------------------------------------------------- generation


def stratified_split(labels: np.ndarray, rng: np.random.Generator, train_frac: float = 0.8) -> np.ndarray:
    labels = np.asarray(labels)
    is_train = np.zeros(labels.shape[0], dtype=bool)
    for c in np.unique(labels):
        rows = np.flatnonzero(labels == c)
        rows = rng.permutation(rows)
        is_train[rows[: int(round(train_frac * rows.size))]] = True
    return is_train


def make_blobs(
    n: int,
    d: int,
    classes: int,
    separation: float,
    rng: np.random.Generator,
    name: str = "blobs",
) -> Dataset:
    """Unit-covariance Gaussian blobs, one per class, split 80/20 by class.

    Class centers are scaled so the closest pair sits exactly ``separation`` apart.
    """
    if n < classes:
        raise ValueError("need at least one point per class")
    if classes == 1:
        centers = np.zeros((1, d))
    else:
        centers = rng.standard_normal((classes, d))
        diffs = centers[:, None, :] - centers[None, :, :]
        dist = np.sqrt((diffs**2).sum(-1))
        dmin = dist[np.triu_indices(classes, 1)].min()
        centers *= separation / dmin
    labels = np.arange(n) % classes
    labels = rng.permutation(labels)
    X = centers[labels] + rng.standard_normal((n, d))
    is_train = stratified_split(labels, rng)
    return Dataset(X, labels, is_train, classes, name)


def flip_labels(ds: Dataset, fraction: float, rng: np.random.Generator) -> tuple[Dataset, CorruptionRecord]:
    """Flip ``round(fraction * n_train)`` train labels to a different class, uniformly."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie strictly between 0 and 1")
    if ds.n_classes < 2:
        raise ValueError("label flipping needs at least two classes")
    y = ds.y_train.copy()
    m = int(round(fraction * ds.n_train))
    flipped = np.sort(rng.choice(ds.n_train, size=m, replace=False))
    original = y[flipped].copy()
    y[flipped] = (original + rng.integers(1, ds.n_classes, size=m)) % ds.n_classes
    record = CorruptionRecord(tuple(int(i) for i in flipped), tuple(int(c) for c in original), fraction)
    return ds.with_train_labels(y), record


# ---------------------------------------------------------------- files


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write via a temp file in the same directory and rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj, path: str | os.PathLike) -> None:
    atomic_write_text(path, json.dumps(obj, indent=1, sort_keys=False) + "\n")


def load_json(path: str | os.PathLike):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _rows_to_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def write_csv(path: str | os.PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    atomic_write_text(path, _rows_to_csv(header, rows))


def load_csv(
    path: str | os.PathLike,
    label_column: str = "label",
    n_classes: Optional[int] = None,
    seed: int = 0,
) -> Dataset:
    """Read a headered CSV into a :class:`Dataset`.

    Every column other than the label (and an optional ``split`` column holding
    ``train``/``test``) becomes a feature, in header order. Without a split
    column the rows are split 80/20 stratified by class using ``seed``.
    """
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file") from None
        if label_column not in header:
            raise MissingColumn(f"label column {label_column!r} not in header {header}")
        li = header.index(label_column)
        si = header.index(SPLIT_COLUMN) if SPLIT_COLUMN in header else None
        fcols = [j for j in range(len(header)) if j not in (li, si)]
        X, y, split = [], [], []
        for r, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} cells, got {len(row)}", row=r)
            try:
                label = int(row[li])
            except ValueError:
                raise ParseError(f"non-integer label {row[li]!r}", row=r, column=label_column) from None
            feats = []
            for j in fcols:
                try:
                    feats.append(float(row[j]))
                except ValueError:
                    raise ParseError(f"non-numeric cell {row[j]!r}", row=r, column=header[j]) from None
            if si is not None:
                tag = row[si].strip().lower()
                if tag not in ("train", "test"):
                    raise ParseError(f"split must be train/test, got {row[si]!r}", row=r, column=SPLIT_COLUMN)
                split.append(tag == "train")
            X.append(feats)
            y.append(label)
    if not y:
        raise ParseError("no data rows")
    labels = np.asarray(y, dtype=np.int64)
    if labels.min() < 0:
        raise ParseError("labels must be non-negative", column=label_column)
    C = int(labels.max()) + 1 if n_classes is None else n_classes
    if si is not None:
        is_train = np.asarray(split, dtype=bool)
    else:
        from ggda.numkit import make_rng

        is_train = stratified_split(labels, make_rng(seed))
    return Dataset(
        np.asarray(X, dtype=float).reshape(len(y), len(fcols)),
        labels,
        is_train,
        C,
        path.stem,
        tuple(header[j] for j in fcols),
    )


def write_dataset_csv(ds: Dataset, path: str | os.PathLike, label_column: str = "label") -> None:
    header = [*ds.feature_names, label_column, SPLIT_COLUMN]
    rows = (
        [*map(float, ds.features[i]), int(ds.labels[i]), "train" if ds.is_train[i] else "test"]
        for i in range(ds.n)
    )
    write_csv(path, header, rows)


def write_scores(sf: ScoreFile, path: str | os.PathLike) -> None:
    """Write the JSON score file and a ``group_id,score,size`` CSV next to it."""
    path = Path(path)
    dump_json(sf.to_json(), path)
    write_csv(
        path.with_suffix(".csv"),
        ["group_id", "score", "size"],
        ([j, float(s), len(m)] for j, (s, m) in enumerate(zip(sf.scores, sf.group_members))),
    )


def read_scores(path: str | os.PathLike) -> ScoreFile:
    try:
        obj = load_json(path)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(obj, dict):
        raise SchemaError("score file must hold a JSON object")
    return ScoreFile.from_json(obj)
