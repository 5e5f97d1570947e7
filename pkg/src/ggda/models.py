"""Softmax classifiers in plain numpy with hand-written gradients.

Two architectures are supported: multinomial logistic regression and a ReLU
MLP. Parameters live in one flat vector ``theta``, layer by layer, each layer
storing its weight matrix (``fan_out x fan_in``, row-major) followed by its
bias. Loss is cross-entropy summed over a batch; the training objective is
the mean over train rows plus ``weight_decay / 2 * ||theta||^2``.

Hessian-vector products use the exact forward-over-reverse (R-operator) pass,
so no finite differencing is involved anywhere.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from ggda.datahub import Dataset
from ggda.errors import NonFiniteLoss, SchemaError, TooLarge
from ggda.numkit import make_rng

EXACT_HESSIAN_MAX_P = 2000


@dataclass(frozen=True)
class Architecture:
    kind: str
    layer_sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if self.kind not in ("logreg", "mlp"):
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError("need at least an input and an output size, all positive")
        if self.kind == "logreg" and len(sizes) != 2:
            raise ValueError("logreg has exactly one layer")
        if self.kind == "mlp" and len(sizes) < 3:
            raise ValueError("mlp needs at least one hidden layer")

    @classmethod
    def logreg(cls, d: int, classes: int) -> "Architecture":
        return cls("logreg", (d, classes))

    @classmethod
    def mlp(cls, d: int, hidden: Sequence[int], classes: int) -> "Architecture":
        return cls("mlp", (d, *hidden, classes))

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [(o, i) for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:])]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.shapes)

    def to_json(self) -> dict:
        return {"kind": self.kind, "layer_sizes": list(self.layer_sizes)}


@dataclass(frozen=True, eq=False)
class ModelState:
    arch: Architecture
    theta: np.ndarray
    tag: Optional[str] = None

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float)
        if theta.shape != (self.arch.n_params,):
            raise ValueError(f"theta has shape {theta.shape}, expected ({self.arch.n_params},)")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @property
    def p(self) -> int:
        return self.arch.n_params

    def to_json(self) -> dict:
        return {"arch": self.arch.to_json(), "theta": [float(t) for t in self.theta], "tag": self.tag}

    @classmethod
    def from_json(cls, obj: dict) -> "ModelState":
        try:
            arch = Architecture(obj["arch"]["kind"], tuple(obj["arch"]["layer_sizes"]))
            return cls(arch, np.asarray(obj["theta"], dtype=float), obj.get("tag"))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed checkpoint: {exc!r}") from exc


@dataclass(frozen=True)
class TrainConfig:
    """Minibatch gradient descent settings.

    ``momentum=0`` is plain GD. ``grad_tol`` stops training early once the
    full-batch objective gradient norm drops to the tolerance (checked every
    epoch), which is how the convex fixtures are driven to their optimum.
    """

    learning_rate: float = 0.1
    epochs: int = 100
    batch_size: int = 64
    weight_decay: float = 0.0
    momentum: float = 0.0
    seed: int = 0
    grad_tol: Optional[float] = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class Checkpoints:
    states: list[ModelState] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.states)

    def __iter__(self) -> Iterator[ModelState]:
        return iter(self.states)

    @property
    def final(self) -> ModelState:
        return self.states[-1]


# ---------------------------------------------------------------- pass counting


@dataclass
class PassCounter:
    """Counts batched forward/backward passes issued through the public API."""

    grad: int = 0
    property: int = 0
    hvp: int = 0


_counters: list[PassCounter] = []


@contextmanager
def count_passes() -> Iterator[PassCounter]:
    counter = PassCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def _tick(kind: str) -> None:
    for c in _counters:
        setattr(c, kind, getattr(c, kind) + 1)


# ---------------------------------------------------------------- core passes


def unpack(arch: Architecture, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    layers, off = [], 0
    for o, i in arch.shapes:
        W = theta[off : off + o * i].reshape(o, i)
        off += o * i
        b = theta[off : off + o]
        off += o
        layers.append((W, b))
    return layers


def _pack(parts: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in parts])


def _forward(arch, theta, X):
    layers = unpack(arch, theta)
    acts, pres = [X], []
    a = X
    for l, (W, b) in enumerate(layers):
        z = a @ W.T + b
        pres.append(z)
        if l < len(layers) - 1:
            a = np.maximum(z, 0.0)
            acts.append(a)
    return layers, acts, pres


def _onehot(y: np.ndarray, C: int) -> np.ndarray:
    out = np.zeros((y.shape[0], C))
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def _as_batch(X, y):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    return X, y


def loss_and_grad(arch: Architecture, theta: np.ndarray, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed cross-entropy over the batch and its gradient, one forward/backward pass."""
    X, y = _as_batch(X, y)
    layers, acts, pres = _forward(arch, theta, X)
    logp = log_softmax(pres[-1], axis=1)
    total = -float(logp[np.arange(y.shape[0]), y].sum())
    delta = np.exp(logp) - _onehot(y, arch.n_classes)
    return total, _backward(layers, acts, pres, delta)


def _backward(layers, acts, pres, delta):
    grads = [None] * len(layers)
    for l in range(len(layers) - 1, -1, -1):
        W, _ = layers[l]
        grads[l] = (delta.T @ acts[l], delta.sum(axis=0))
        if l > 0:
            delta = (delta @ W) * (pres[l - 1] > 0)
    return _pack(grads)


def output_grad(m: ModelState, x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. theta of ``weights . logits(x)`` for a single row."""
    layers, acts, pres = _forward(m.arch, m.theta, np.atleast_2d(np.asarray(x, dtype=float)))
    return _backward(layers, acts, pres, np.atleast_2d(np.asarray(weights, dtype=float)))


def hvp_sum(arch: Architecture, theta: np.ndarray, X: np.ndarray, y: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Hessian of the summed batch loss times ``v`` (Pearlmutter's R-operator)."""
    X, y = _as_batch(X, y)
    layers, acts, pres = _forward(arch, theta, X)
    vlayers = unpack(arch, np.asarray(v, dtype=float))
    L = len(layers)

    r_acts = [np.zeros_like(X)]
    r_pres = []
    for l, ((W, _), (VW, Vb)) in enumerate(zip(layers, vlayers)):
        rz = r_acts[l] @ W.T + acts[l] @ VW.T + Vb
        r_pres.append(rz)
        if l < L - 1:
            r_acts.append(rz * (pres[l] > 0))

    s = softmax(pres[-1], axis=1)
    delta = s - _onehot(y, arch.n_classes)
    rz = r_pres[-1]
    r_delta = s * (rz - (s * rz).sum(axis=1, keepdims=True))
    out = [None] * L
    for l in range(L - 1, -1, -1):
        W, _ = layers[l]
        VW, _ = vlayers[l]
        out[l] = (r_delta.T @ acts[l] + delta.T @ r_acts[l], r_delta.sum(axis=0))
        if l > 0:
            mask = pres[l - 1] > 0
            r_delta, delta = (r_delta @ W + delta @ VW) * mask, (delta @ W) * mask
    return _pack(out)


def logits(m: ModelState, X: np.ndarray) -> np.ndarray:
    _, _, pres = _forward(m.arch, m.theta, np.atleast_2d(np.asarray(X, dtype=float)))
    return pres[-1]


def accuracy(m: ModelState, X: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(np.argmax(logits(m, X), axis=1) == np.asarray(y)))


def test_accuracy(m: ModelState, ds: Dataset) -> float:
    return accuracy(m, ds.X_test, ds.y_test)


# ---------------------------------------------------------------- public gradients


def loss(m: ModelState, x: np.ndarray, y: int) -> float:
    """Cross-entropy ``-log softmax(f(x))[y]`` for one row."""
    logp = log_softmax(logits(m, x)[0])
    return float(-logp[int(y)])


def grad_single(m: ModelState, x: np.ndarray, y: int) -> np.ndarray:
    _tick("grad")
    return loss_and_grad(m.arch, m.theta, np.atleast_2d(x), np.atleast_1d(y))[1]


def grad_group(m: ModelState, ds: Dataset, indices: Sequence[int]) -> np.ndarray:
    """Gradient of the summed loss over the given train positions, in one batched pass."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        return np.zeros(m.p)
    rows = ds.train_rows[idx]
    _tick("grad")
    return loss_and_grad(m.arch, m.theta, ds.features[rows], ds.labels[rows])[1]


def objective_grad(m: ModelState, ds: Dataset, weight_decay: float = 0.0) -> np.ndarray:
    """Gradient of mean train loss plus the weight-decay term."""
    _, g = loss_and_grad(m.arch, m.theta, ds.X_train, ds.y_train)
    return g / ds.n_train + weight_decay * m.theta


def hvp(
    m: ModelState,
    ds: Dataset,
    v: np.ndarray,
    indices: Optional[Sequence[int]] = None,
    weight_decay: float = 0.0,
) -> np.ndarray:
    """Hessian of (mean loss over ``indices`` + weight decay) applied to ``v``.

    ``indices`` are train positions and default to the whole train split.
    """
    if indices is None:
        X, y = ds.X_train, ds.y_train
    else:
        rows = ds.train_rows[np.asarray(indices, dtype=np.int64)]
        X, y = ds.features[rows], ds.labels[rows]
    _tick("hvp")
    return hvp_sum(m.arch, m.theta, X, y, v) / X.shape[0] + weight_decay * np.asarray(v, dtype=float)


def exact_hessian(m: ModelState, ds: Dataset, weight_decay: float = 0.0) -> np.ndarray:
    """Dense Hessian of the training objective, built column by column from exact HVPs."""
    p = m.p
    if p > EXACT_HESSIAN_MAX_P:
        raise TooLarge(f"exact Hessian needs p <= {EXACT_HESSIAN_MAX_P}, model has p={p}")
    X, y = ds.X_train, ds.y_train
    H = np.empty((p, p))
    eye = np.eye(p)
    for j in range(p):
        H[:, j] = hvp_sum(m.arch, m.theta, X, y, eye[j])
    H /= X.shape[0]
    H = 0.5 * (H + H.T)
    H[np.diag_indices(p)] += weight_decay
    return H


def hidden_repr(m: ModelState, X: np.ndarray) -> np.ndarray:
    """Last hidden activations (rows of ``X`` themselves for logistic regression)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if m.arch.kind == "logreg":
        return X.copy()
    _, acts, _ = _forward(m.arch, m.theta, X)
    return acts[-1]


def penult_grad(m: ModelState, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-row gradient of the loss w.r.t. the penultimate activations, ``W_out^T (p - e_y)``."""
    X, y = _as_batch(X, y)
    layers, _, pres = _forward(m.arch, m.theta, X)
    delta = softmax(pres[-1], axis=1) - _onehot(y, m.arch.n_classes)
    return delta @ layers[-1][0]


# ---------------------------------------------------------------- training


def init_theta(arch: Architecture, rng: np.random.Generator) -> np.ndarray:
    if arch.kind == "logreg":
        return np.zeros(arch.n_params)
    parts = [
        (rng.standard_normal((o, i)) * math.sqrt(2.0 / i), np.zeros(o)) for o, i in arch.shapes
    ]
    return _pack(parts)


def train(
    arch: Architecture,
    ds: Dataset,
    cfg: TrainConfig,
    snapshot_every: Optional[int] = None,
) -> tuple[ModelState, Checkpoints]:
    """Minimize mean cross-entropy + weight decay on the train split.

    Shuffling and initialization come only from ``cfg.seed``, so identical
    inputs give bit-identical parameters. Snapshots are taken every
    ``snapshot_every`` epochs; the final state is always the last snapshot.
    """
    if ds.n_train < 1:
        raise ValueError("dataset has no train rows")
    if ds.d != arch.layer_sizes[0]:
        raise ValueError(f"dataset has {ds.d} features, architecture expects {arch.layer_sizes[0]}")
    rng = make_rng(cfg.seed)
    theta = init_theta(arch, rng)
    X, y = ds.X_train, ds.y_train
    n = X.shape[0]
    bs = min(cfg.batch_size, n)
    full_batch = bs == n
    velocity = np.zeros_like(theta)
    ckpts = Checkpoints()
    epoch = 0

    def objective(batch_X, batch_y):
        total, g = loss_and_grad(arch, theta, batch_X, batch_y)
        if not np.isfinite(total) or not np.all(np.isfinite(g)):
            raise NonFiniteLoss(f"loss became non-finite at epoch {epoch}; lower the learning rate")
        return g / batch_X.shape[0] + cfg.weight_decay * theta

    for epoch in range(1, cfg.epochs + 1):
        if full_batch:
            g = objective(X, y)
            if cfg.grad_tol is not None and np.linalg.norm(g) <= cfg.grad_tol:
                break
            velocity = cfg.momentum * velocity + g
            theta = theta - cfg.learning_rate * velocity
        else:
            order = rng.permutation(n)
            for start in range(0, n, bs):
                b = order[start : start + bs]
                velocity = cfg.momentum * velocity + objective(X[b], y[b])
                theta = theta - cfg.learning_rate * velocity
            if cfg.grad_tol is not None and np.linalg.norm(objective(X, y)) <= cfg.grad_tol:
                break
        if snapshot_every and epoch % snapshot_every == 0:
            ckpts.states.append(ModelState(arch, theta, f"epoch_{epoch}"))

    final = ModelState(arch, theta, f"epoch_{epoch}")
    if not ckpts.states or not np.array_equal(ckpts.states[-1].theta, theta):
        ckpts.states.append(final)
    else:
        final = ckpts.states[-1]
    return final, ckpts


def with_tag(m: ModelState, tag: str) -> ModelState:
    return replace(m, tag=tag)
