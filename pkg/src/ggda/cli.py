"""``ggda`` command line: train -> group -> attribute -> eval -> bench over files.

Every subcommand reads the run config plus the files written by earlier steps
in the output directory, and writes its own artifacts atomically. Exit codes:
0 success, 1 other failure (missing inputs, bad files), 2 config error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from ggda import datahub, evalkit, grouping, models, numkit
from ggda.attributors import AttributionScores, PropertyFn, influence, loo_oracle, tracin, trak
from ggda.config import RunConfig, load_config
from ggda.errors import ConfigError, GGDAError, NumericalError, SchemaError
from ggda.hessians import DEFAULT_FISHER_DAMP, HessianStrategy

DATASET_FILE = "dataset.csv"
CORRUPTION_FILE = "corruption.json"
MODEL_FILE = "model.json"
CHECKPOINT_DIR = "checkpoints"
CHECKPOINT_INDEX = "index.json"
PARTITION_FILE = "partition.json"
SCORES_FILE = "scores.json"
BENCH_FILE = "bench.csv"

# sub-streams of the run seed
_DATA_STREAM, _FLIP_STREAM = 1, 2


class MissingInput(GGDAError):
    """An upstream artifact is absent from the output directory."""


def _need(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingInput(f"{path} not found; run `ggda {producer}` first")
    return path


# ------------------------------------------------------------------ builders


def arch_for(cfg: RunConfig, d: int, classes: int) -> models.Architecture:
    if cfg.arch.kind == "logreg":
        return models.Architecture.logreg(d, classes)
    return models.Architecture.mlp(d, cfg.arch.hidden, classes)


def train_config(cfg: RunConfig) -> models.TrainConfig:
    t = cfg.train
    return models.TrainConfig(
        learning_rate=t.learning_rate,
        epochs=t.epochs,
        batch_size=t.batch_size,
        weight_decay=t.weight_decay,
        momentum=t.momentum,
        seed=cfg.seed,
        grad_tol=t.grad_tol,
    )


def hessian_strategy(cfg: RunConfig) -> HessianStrategy:
    h = cfg.attribution.hessian
    damp = h.damp
    if damp is None:
        damp = DEFAULT_FISHER_DAMP if h.kind in ("emp_fisher", "batched_emp_fisher") else 0.0
    return HessianStrategy(
        kind=h.kind,
        damp=damp,
        tol=h.tol,
        max_iter=h.max_iter,
        scale=h.scale,
        depth=h.depth,
        repeat=h.repeat,
        batch_size=h.batch_size,
        proj_dim=h.proj_dim,
        seed=cfg.seed,
    )


def property_fn(cfg: RunConfig) -> PropertyFn:
    p = cfg.attribution.property
    try:
        return PropertyFn(p.kind, index=p.index, indices=tuple(p.indices) if p.indices else None)
    except ValueError as exc:
        raise ConfigError("attribution.property", str(exc)) from exc


def source_dataset(cfg: RunConfig) -> datahub.Dataset:
    spec = cfg.dataset
    if spec.synthetic is not None:
        s = spec.synthetic
        rng = numkit.make_rng(numkit.derive_seed(cfg.seed, _DATA_STREAM))
        return datahub.make_blobs(s.n, s.d, s.classes, s.separation, rng)
    return datahub.load_csv(spec.path, spec.label_column, seed=cfg.seed)


# ------------------------------------------------------------------ loaders


def _out(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir)


def load_model(cfg: RunConfig) -> models.ModelState:
    return models.ModelState.from_json(datahub.load_json(_need(_out(cfg) / MODEL_FILE, "train")))


def load_dataset(cfg: RunConfig, model: models.ModelState) -> datahub.Dataset:
    path = _need(_out(cfg) / DATASET_FILE, "train")
    return datahub.load_csv(path, cfg.dataset.label_column, n_classes=model.arch.n_classes)


def load_checkpoints(cfg: RunConfig) -> list[models.ModelState]:
    cdir = _out(cfg) / CHECKPOINT_DIR
    index = datahub.load_json(_need(cdir / CHECKPOINT_INDEX, "train"))
    return [models.ModelState.from_json(datahub.load_json(_need(cdir / f, "train"))) for f in index["checkpoints"]]


def load_partition(cfg: RunConfig) -> grouping.Partition:
    return grouping.Partition.from_json(datahub.load_json(_need(_out(cfg) / PARTITION_FILE, "group")))


def load_scores(cfg: RunConfig) -> AttributionScores:
    return AttributionScores.from_scorefile(datahub.read_scores(_need(_out(cfg) / SCORES_FILE, "attribute")))


def load_corruption(cfg: RunConfig) -> datahub.CorruptionRecord:
    path = _out(cfg) / CORRUPTION_FILE
    if not path.exists():
        raise ConfigError("eval.flip_fraction", "noisy-label evaluation needs flip_fraction > 0 at train time")
    return datahub.CorruptionRecord.from_json(datahub.load_json(path))


# ------------------------------------------------------------------ commands


def cmd_train(cfg: RunConfig) -> list[Path]:
    out = _out(cfg)
    ds = source_dataset(cfg)
    written = []
    if cfg.eval.flip_fraction > 0:
        rng = numkit.make_rng(numkit.derive_seed(cfg.seed, _FLIP_STREAM))
        ds, record = datahub.flip_labels(ds, cfg.eval.flip_fraction, rng)
        datahub.dump_json(record.to_json(), out / CORRUPTION_FILE)
        written.append(out / CORRUPTION_FILE)
    datahub.write_dataset_csv(ds, out / DATASET_FILE, cfg.dataset.label_column)
    arch = arch_for(cfg, ds.d, ds.n_classes)
    final, ckpts = models.train(arch, ds, train_config(cfg), cfg.train.snapshot_every)
    cdir = out / CHECKPOINT_DIR
    names = []
    for state in ckpts:
        name = f"{state.tag}.json"
        datahub.dump_json(state.to_json(), cdir / name)
        names.append(name)
    datahub.dump_json({"checkpoints": names}, cdir / CHECKPOINT_INDEX)
    datahub.dump_json(final.to_json(), out / MODEL_FILE)
    return written + [out / DATASET_FILE, out / MODEL_FILE, cdir / CHECKPOINT_INDEX]


def cmd_group(cfg: RunConfig) -> list[Path]:
    model = load_model(cfg)
    ds = load_dataset(cfg, model)
    g = cfg.grouping
    part = grouping.make_partition(g.method, ds, g.group_size, cfg.seed, model, g.tol, g.max_iter)
    path = _out(cfg) / PARTITION_FILE
    datahub.dump_json(part.to_json(), path)
    return [path]


def cmd_attribute(cfg: RunConfig) -> list[Path]:
    model = load_model(cfg)
    ds = load_dataset(cfg, model)
    part = load_partition(cfg)
    if part.n != ds.n_train:
        raise SchemaError(f"partition covers {part.n} points, dataset has {ds.n_train} train rows")
    g = property_fn(cfg)
    a = cfg.attribution
    if a.method == "influence":
        scores = influence(model, ds, part, g, hessian_strategy(cfg), cfg.train.weight_decay)
    elif a.method == "tracin":
        scores = tracin(load_checkpoints(cfg), ds, part, g)
    elif a.method == "trak":
        scores = trak(
            model.arch, ds, part, g, train_config(cfg),
            M=a.trak.M, subsample_frac=a.trak.subsample_frac, proj_dim=a.trak.proj_dim, seed=cfg.seed,
        )
    else:
        scores = loo_oracle(model.arch, ds, part, g, train_config(cfg), a.loo_seeds)
    scores.seed = cfg.seed
    path = _out(cfg) / SCORES_FILE
    datahub.write_scores(scores.to_scorefile(), path)
    return [path, path.with_suffix(".csv")]


def _write_report(cfg: RunConfig, report: evalkit.EvalReport, metric: str) -> list[Path]:
    base = _out(cfg) / f"eval_{metric}"
    datahub.dump_json(report.to_json(), base.with_suffix(".json"))
    datahub.write_csv(base.with_suffix(".csv"), evalkit.EvalReport.CSV_HEADER, report.csv_rows())
    return [base.with_suffix(".json"), base.with_suffix(".csv")]


def cmd_eval(cfg: RunConfig, metric: str) -> list[Path]:
    model = load_model(cfg)
    ds = load_dataset(cfg, model)
    scores = load_scores(cfg)
    tc = train_config(cfg)
    e = cfg.eval
    if metric == "retrain":
        report = evalkit.removal_curve(
            scores, model.arch, ds, tc, e.fractions, e.n_seeds, evalkit.TOP_FIRST, cfg.seed, "retrain"
        )
    elif metric == "prune":
        report = evalkit.pruning_eval(scores, model.arch, ds, tc, e.prune_fractions, e.n_seeds, cfg.seed)
    elif metric == "noisy":
        record = load_corruption(cfg)
        auc = evalkit.noisy_label_auc(scores, record)
        report = evalkit.EvalReport("noisy_auc", None, [evalkit.EvalRow(record.fraction, auc, 0.0, 1)], [])
    else:
        raise ConfigError("metric", f"unknown metric {metric!r}")
    return _write_report(cfg, report, metric)


def cmd_bench(cfg: RunConfig) -> list[Path]:
    model = load_model(cfg)
    ds = load_dataset(cfg, model)
    b = cfg.bench
    rows = evalkit.bench_da_vs_ggda(
        b.method, ds, model, b.group_sizes, b.reps, property_fn(cfg),
        hessian_strategy(cfg), cfg.train.weight_decay, cfg.seed,
    )
    path = _out(cfg) / BENCH_FILE
    datahub.write_csv(path, evalkit.BENCH_HEADER, ([r.group_size, r.median_s, r.passes, r.speedup] for r in rows))
    return [path]


# ------------------------------------------------------------------ entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ggda", description="Group data attribution pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [
        ("train", "build the dataset and train the model"),
        ("group", "partition the training set"),
        ("attribute", "score every group"),
        ("eval", "evaluate the scores"),
        ("bench", "time per-point vs grouped attribution"),
    ]:
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="run config (JSON)")
        p.add_argument("--out", help="output directory (overrides config and $GGDA_OUTPUT_DIR)")
        p.add_argument("--seed", type=int, help="override the config seed")
        if name == "eval":
            p.add_argument("--metric", required=True, choices=["retrain", "prune", "noisy"])
    return parser


def run(argv: Optional[Sequence[str]] = None) -> list[Path]:
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config, out=args.out, seed=args.seed)
    if args.command == "train":
        return cmd_train(cfg)
    if args.command == "group":
        return cmd_group(cfg)
    if args.command == "attribute":
        return cmd_attribute(cfg)
    if args.command == "eval":
        return cmd_eval(cfg, args.metric)
    return cmd_bench(cfg)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        written = run(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (GGDAError, OSError, ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
