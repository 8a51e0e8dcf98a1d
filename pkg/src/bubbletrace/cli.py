"""Command-line pipeline: ingest -> communities -> train -> bubble / influence -> modify -> report."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import shutil
import sys
from collections import Counter
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from filelock import FileLock, Timeout

from . import __version__
from .category import (
    CategorizedDataset,
    Category,
    categorize_training,
    categorize_validation,
    training_categories_csv,
    validation_categories_csv,
)
from .community import community_sweep, load_community_map, save_community_map, sweep_csv
from .config import ConfigError, PipelineConfig, load_config, stage_seed
from .diversity import bubble_csv, bubble_report
from .influence import (
    TRAIN_CATEGORIES,
    VALIDATION_CATEGORIES,
    cross_category_experiment,
    heatmap_csv,
    influence_matrix_csv,
    select_checkpoints,
    self_vs_random_experiment,
)
from .ingest import (
    IngestError,
    build_dataset,
    dataset_statistics,
    examples_to_arrays,
    filter_dataset,
    generate_synthetic,
    load_dataset,
    parse_interactions,
    sample_users,
    save_dataset,
)
from .model import (
    Hyperparams,
    ModelConfig,
    TrainingDivergedError,
    load_checkpoint,
    mrr,
    recall_at_k,
    save_checkpoint,
    train,
)
from .modify import run_experiment_suite

logger = logging.getLogger("bubbletrace")

SCHEMA_VERSION = 1
STAGES = ("ingest", "communities", "train", "bubble", "influence", "modify", "report")
# what each stage needs, and the message shown when it is missing
UPSTREAM = {
    "ingest": (),
    "communities": ("ingest",),
    "train": ("ingest",),
    "bubble": ("ingest", "communities", "train"),
    "influence": ("ingest", "communities", "train"),
    "modify": ("ingest", "communities", "influence"),
    "report": ("ingest",),
}
MISSING = {
    "ingest": "dataset not found; run `bubbletrace ingest` first",
    "communities": "community map not found; run `bubbletrace communities` first",
    "train": "checkpoints not found; run `bubbletrace train` first",
    "influence": "categories not found; run `bubbletrace influence` first",
}


class PipelineError(RuntimeError):
    """A stage cannot run; the message is shown to the user."""


class Workspace:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def stage_dir(self, stage: str) -> Path:
        return self.root / stage

    def record_path(self, stage: str) -> Path:
        return self.stage_dir(stage) / "stage.json"

    def require(self, stage: str) -> dict:
        path = self.record_path(stage)
        if not path.exists():
            raise PipelineError(MISSING.get(stage, f"{stage} artifacts not found"))
        record = json.loads(path.read_text(encoding="utf-8"))
        if record.get("schema_version") != SCHEMA_VERSION:
            raise PipelineError(
                f"{stage} artifacts use schema version {record.get('schema_version')}, expected {SCHEMA_VERSION}; rerun that stage"
            )
        return record

    def prepare(self, stage: str, force: bool) -> Path:
        d = self.stage_dir(stage)
        if d.exists() and any(d.iterdir()):
            if not force:
                raise PipelineError(f"{d} already exists; pass --force to overwrite")
            shutil.rmtree(d)
        d.mkdir(parents=True, exist_ok=True)
        return d

    def finish(self, stage: str, seed: int, outputs: Sequence[str], extra: dict | None = None) -> None:
        record = {
            "stage": stage,
            "schema_version": SCHEMA_VERSION,
            "package_version": __version__,
            "seed": seed,
            "outputs": sorted(outputs),
        }
        if extra:
            record.update(extra)
        write_json(self.record_path(stage), record)


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")


def write_text(directory: Path, name: str, text: str) -> str:
    (directory / name).write_text(text, encoding="utf-8")
    return name


def rows_csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def model_config(cfg: PipelineConfig, n_items: int) -> ModelConfig:
    m = cfg.model
    return ModelConfig(
        n_items=n_items,
        embedding_dim=m.embedding_dim,
        hidden_dim=m.hidden_dim,
        lookback=m.lookback,
        flatten=m.flatten,
        forget_bias=float(m.forget_bias),
    )


def hyperparams(cfg: PipelineConfig, seed: int) -> Hyperparams:
    m = cfg.model
    return Hyperparams(
        batch_size=m.batch_size,
        epochs=m.epochs,
        learning_rate=float(m.learning_rate),
        momentum=float(m.momentum),
        checkpoint_interval=m.checkpoint_interval,
        seed=seed,
    )


def load_stage_dataset(ws: Workspace, cfg: PipelineConfig):
    ds = load_dataset(ws.stage_dir("ingest") / "dataset.bin")
    if ds.lookback != cfg.model.lookback:
        raise PipelineError(
            f"dataset was windowized with lookback {ds.lookback} but model.lookback is {cfg.model.lookback}; rerun ingest"
        )
    return ds


def load_checkpoints(ws: Workspace):
    record = ws.require("train")
    d = ws.stage_dir("train") / "checkpoints"
    return [load_checkpoint(d / name) for name in record["checkpoints"]]


# ---------------------------------------------------------------- stages


def cmd_ingest(ws: Workspace, cfg: PipelineConfig, root_seed: int, force: bool, synthetic: bool = False) -> None:
    ing = cfg.ingest
    seed = stage_seed(root_seed, "ingest")
    if synthetic:
        s = ing.synthetic
        raw = generate_synthetic(
            s.n_users, s.n_items, s.n_communities, float(s.bubble_strength), s.records_per_user, seed
        )
        source = "synthetic"
    else:
        if ing.raw_path is None:
            raise PipelineError("ingest.raw_path is not set; give a CSV path or pass --synthetic")
        path = Path(ing.raw_path)
        if not path.exists():
            raise PipelineError(f"raw interaction file not found: {path}")
        with open(path, newline="", encoding="utf-8") as fh:
            raw = parse_interactions(fh, has_header=ing.has_header)
        source = str(path.name)
    if ing.n_users is not None:
        raw = sample_users(raw, ing.n_users, stage_seed(root_seed, "ingest.sample"))
    kept = filter_dataset(raw, ing.min_item_interactions, ing.min_user_interactions)
    if not kept:
        raise PipelineError("no interactions survive the item and user filters")
    out = ws.prepare("ingest", force)
    ds = build_dataset(raw, kept, cfg.model.lookback)
    save_dataset(out / "dataset.bin", ds)
    before, after = dataset_statistics(raw), dataset_statistics(kept)
    table = rows_csv(
        ["statistic", "before", "after"],
        [[k, f"{before[k]:.4f}", f"{after[k]:.4f}"] for k in before],
    )
    split_counts = Counter(ex.split for ex in ds.examples)
    stats = {"before": before, "after": after, "examples": {k: split_counts.get(k, 0) for k in ("train", "validation", "test")}}
    write_json(out / "statistics.json", stats)
    outputs = ["dataset.bin", "statistics.json", write_text(out, "statistics.csv", table)]
    ws.finish("ingest", seed, outputs, {"source": source})
    print(table, end="")


def cmd_communities(ws: Workspace, cfg: PipelineConfig, root_seed: int, force: bool) -> None:
    ws.require("ingest")
    ds = load_stage_dataset(ws, cfg)
    com = cfg.community
    seed = stage_seed(root_seed, "communities")
    pairs = [(ds.raw_users[u], ds.raw_items[i]) for u, i in ds.raw_pairs.tolist()]
    rows, maps = community_sweep(pairs, com.thresholds, seed=seed % 2**32, strategy=com.strategy, weighted_degree=com.weighted_degree)
    chosen = maps.get(com.selected_threshold)
    if chosen is None:
        raise PipelineError(f"the item graph is empty at selected threshold {com.selected_threshold}")
    mapping = {}
    unmapped = []
    for item in ds.catalog.item_ids:
        if item in chosen.assignment:
            mapping[ds.catalog.index(item)] = chosen.assignment[item]
        else:
            unmapped.append(item)
    # catalog items missing from the graph become singleton communities
    next_id = chosen.n_communities
    for item in unmapped:
        mapping[ds.catalog.index(item)] = next_id
        next_id += 1
    if unmapped:
        logger.warning("%d catalog items fall below the community threshold; each gets its own community", len(unmapped))
    out = ws.prepare("communities", force)
    save_community_map(out, mapping, chosen, com.selected_threshold)
    sizes = Counter(mapping.values())
    outputs = [
        write_text(out, "sweep.csv", sweep_csv(rows)),
        write_text(out, "community_sizes.csv", rows_csv(["community_id", "n_items"], sorted(sizes.items()))),
        "community_map.csv",
        "community_map.json",
    ]
    ws.finish("communities", seed, outputs, {"unmapped_items": len(unmapped)})
    print(sweep_csv(rows), end="")


def cmd_train(ws: Workspace, cfg: PipelineConfig, root_seed: int, force: bool) -> None:
    ws.require("ingest")
    ds = load_stage_dataset(ws, cfg)
    seed = stage_seed(root_seed, "train")
    X, y = examples_to_arrays(ds.split("train"), ds.lookback)
    if len(y) == 0:
        raise PipelineError("the training split is empty")
    mc = model_config(cfg, ds.n_items)
    try:
        result = train(X, y, mc, hyperparams(cfg, seed))
    except TrainingDivergedError as exc:
        raise PipelineError(str(exc)) from None
    out = ws.prepare("train", force)
    ck_dir = out / "checkpoints"
    ck_dir.mkdir()
    names = []
    for ck in result.checkpoints:
        name = f"epoch_{ck.epoch:05d}.ckpt"
        save_checkpoint(ck_dir / name, ck)
        names.append(name)
    trace = rows_csv(["epoch", "mean_loss"], [[e, repr(v)] for e, v in result.loss_trace])
    metrics = {}
    for split in ("validation", "test"):
        Xs, ys = examples_to_arrays(ds.split(split), ds.lookback)
        if len(ys):
            metrics[split] = {"mrr": mrr(result.params, Xs, ys), "recall_at_10": recall_at_k(result.params, Xs, ys, 10)}
    write_json(out / "metrics.json", metrics)
    outputs = [write_text(out, "loss_trace.csv", trace), "metrics.json"] + [f"checkpoints/{n}" for n in names]
    ws.finish("train", seed, outputs, {"checkpoints": names})
    print(json.dumps(metrics, indent=2, sort_keys=True))


def cmd_bubble(ws: Workspace, cfg: PipelineConfig, root_seed: int, force: bool) -> None:
    for stage in UPSTREAM["bubble"]:
        ws.require(stage)
    ds = load_stage_dataset(ws, cfg)
    cmap = load_community_map(ws.stage_dir("communities"))
    final = load_checkpoints(ws)[-1]
    rows = bubble_report(final.params, ds.split(cfg.bubble.split), cmap, cfg.bubble.lookbacks)
    out = ws.prepare("bubble", force)
    outputs = [write_text(out, "bubble_report.csv", bubble_csv(rows))]
    ws.finish("bubble", stage_seed(root_seed, "bubble"), outputs, {"split": cfg.bubble.split})
    print(bubble_csv(rows), end="")


def cmd_influence(ws: Workspace, cfg: PipelineConfig, root_seed: int, force: bool) -> None:
    for stage in UPSTREAM["influence"]:
        ws.require(stage)
    ds = load_stage_dataset(ws, cfg)
    cmap = load_community_map(ws.stage_dir("communities"))
    checkpoints = load_checkpoints(ws)
    chosen = select_checkpoints(checkpoints, cfg.influence.include_initial_checkpoint)
    train_ex, val_ex = ds.split("train"), ds.split("validation")
    X, y = examples_to_arrays(train_ex, ds.lookback)
    Xv, _ = examples_to_arrays(val_ex, ds.lookback)
    cat = cfg.category
    inf = cfg.influence
    try:
        train_cats = categorize_training(train_ex, cmap, cat.band)
        val_cats = categorize_validation(
            checkpoints[-1].params, val_ex, cmap, cat.band, cat.top_k, cat.random_pool_size,
            stage_seed(root_seed, "influence.validation_pool"),
        )
    except ValueError as exc:
        raise PipelineError(str(exc)) from None

    train_pools = {Category.RANDOM: (X, y)}
    for c in TRAIN_CATEGORIES[1:]:
        idx = train_cats.indices(c)
        train_pools[c] = (X[idx], y[idx])
    val_pools = {}
    for c in VALIDATION_CATEGORIES:
        pts = val_cats.of(c)
        ex_idx = np.array([p.example for p in pts], dtype=np.int64)
        val_pools[c] = (Xv[ex_idx], np.array([p.item for p in pts], dtype=np.int64))

    svr = self_vs_random_experiment(
        chosen, X, y, inf.subset_size, inf.self_repetitions, inf.self_batch_size,
        stage_seed(root_seed, "influence.self_vs_random"),
    )
    try:
        cross = cross_category_experiment(
            chosen, train_pools, val_pools, inf.samples_per_category, inf.cross_repetitions,
            inf.cross_batch_size, stage_seed(root_seed, "influence.cross_category"),
        )
    except ValueError as exc:
        raise PipelineError(str(exc)) from None

    out = ws.prepare("influence", force)
    write_json(out / "self_vs_random.json", svr.to_json())
    summary = {
        "checkpoint_epochs": [c.epoch for c in chosen],
        "training_counts": train_cats.counts(),
        "validation_counts": {c.value: len(val_cats.of(c)) for c in VALIDATION_CATEGORIES},
        "cells": {c.name: c.grand_mean for c in cross.cells},
    }
    write_json(out / "summary.json", summary)
    outputs = [
        write_text(out, "training_categories.csv", training_categories_csv(train_ex, train_cats)),
        write_text(out, "validation_categories.csv", validation_categories_csv(val_cats, cmap)),
        write_text(out, "influence_matrix.csv", influence_matrix_csv(cross)),
        write_text(out, "heatmap.csv", heatmap_csv(cross)),
        "self_vs_random.json",
        "summary.json",
    ]
    ws.finish("influence", stage_seed(root_seed, "influence"), outputs)
    print(json.dumps({"self_vs_random": {k: v for k, v in svr.to_json().items() if not k.endswith("series")}, **summary}, indent=2, sort_keys=True))


def read_training_categories(path: Path) -> CategorizedDataset:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return CategorizedDataset(
        labels=[Category(r["label"]) for r in rows],
        diversities=np.array([float(r["history_diversity"]) for r in rows]),
        target_communities=[int(r["target_community"]) for r in rows],
        low_cut=float("nan"),
        high_cut=float("nan"),
    )


def cmd_modify(ws: Workspace, cfg: PipelineConfig, root_seed: int, force: bool) -> None:
    for stage in UPSTREAM["modify"]:
        ws.require(stage)
    ds = load_stage_dataset(ws, cfg)
    cmap = load_community_map(ws.stage_dir("communities"))
    cats = read_training_categories(ws.stage_dir("influence") / "training_categories.csv")
    if len(cats.labels) != len(ds.split("train")):
        raise PipelineError("training categories do not match the dataset; rerun influence")
    seed = stage_seed(root_seed, "modify") % 2**31
    report = run_experiment_suite(
        ds, cmap, cats, model_config(cfg, ds.n_items), hyperparams(cfg, seed),
        cfg.modify.plans, cfg.modify.retrains_per_plan, base_seed=seed,
    )
    out = ws.prepare("modify", force)
    write_json(out / "summary.json", report.summary())
    outputs = [write_text(out, "report.csv", report.to_csv()), "summary.json"]
    ws.finish("modify", seed, outputs)
    print(report.to_csv(), end="")


def cmd_report(ws: Workspace, cfg: PipelineConfig, root_seed: int, force: bool) -> None:
    ws.require("ingest")
    files = []
    stages = []
    for stage in STAGES[:-1]:
        if not ws.record_path(stage).exists():
            continue
        record = ws.require(stage)
        stages.append(stage)
        for name in ["stage.json"] + record["outputs"]:
            path = ws.stage_dir(stage) / name
            data = path.read_bytes()
            files.append({"path": f"{stage}/{name}", "bytes": len(data), "sha256": hashlib.sha256(data).hexdigest()})
    out = ws.prepare("report", force)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "package_version": __version__,
        "root_seed": root_seed,
        "stages": stages,
        "missing_stages": [s for s in STAGES[:-1] if s not in stages],
        "config": cfg.to_dict(),
        "files": files,
    }
    write_json(out / "manifest.json", manifest)
    ws.finish("report", root_seed, ["manifest.json"])
    print(f"manifest covers {len(files)} files from stages: {', '.join(stages)}")


COMMANDS = {
    "ingest": cmd_ingest,
    "communities": cmd_communities,
    "train": cmd_train,
    "bubble": cmd_bubble,
    "influence": cmd_influence,
    "modify": cmd_modify,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS lets the flags appear before or after the subcommand
    common.add_argument("--config", default=argparse.SUPPRESS, help="YAML configuration file")
    common.add_argument("--workspace", default=argparse.SUPPRESS, help="directory holding all stage outputs")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="root seed (overrides the config)")
    common.add_argument("--force", action="store_true", default=argparse.SUPPRESS, help="overwrite existing stage outputs")
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS, help="more logging")

    parser = argparse.ArgumentParser(
        prog="bubbletrace", parents=[common], description="Filter-bubble audit and mitigation pipeline."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "ingest": "parse, filter, split and windowize interactions",
        "communities": "degree sweep and Louvain community map",
        "train": "train the LSTM and save checkpoints",
        "bubble": "history vs recommendation diversity report",
        "influence": "categorize points and run both influence experiments",
        "modify": "retrain under each cleansing/augmentation plan",
        "report": "bundle all outputs with a manifest",
    }
    for name in STAGES:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "ingest":
            p.add_argument("--synthetic", action="store_true", help="generate planted-bubble data instead of reading a CSV")
    return parser


@contextmanager
def workspace_lock(root: Path) -> Iterator[None]:
    root.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(root / ".lock"), timeout=0)
    try:
        with lock:
            yield
    except Timeout:
        raise PipelineError(f"workspace {root} is locked by another bubbletrace command") from None


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    verbose = getattr(args, "verbose", 0)
    logging.basicConfig(
        level=logging.DEBUG if verbose > 1 else logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(getattr(args, "config", None))
        root_seed = getattr(args, "seed", None)
        if root_seed is None:
            root_seed = cfg.seed
        if root_seed < 0:
            raise ConfigError("--seed must be non-negative")
        workspace = getattr(args, "workspace", None) or cfg.workspace
        if workspace is None:
            raise ConfigError("no workspace given; pass --workspace or set `workspace` in the config")
        ws = Workspace(workspace)
        force = getattr(args, "force", False)
        with workspace_lock(ws.root):
            if args.command == "ingest":
                cmd_ingest(ws, cfg, root_seed, force, synthetic=args.synthetic)
            else:
                COMMANDS[args.command](ws, cfg, root_seed, force)
    except (PipelineError, ConfigError, IngestError) as exc:
        print(f"bubbletrace {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
