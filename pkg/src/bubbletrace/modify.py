"""Training-set cleansing/augmentation plans and the retraining comparison."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .category import CategorizedDataset, Category
from .diversity import recommendation_diversity
from .ingest import Dataset, examples_to_arrays
from .model import Hyperparams, ModelConfig, TrainingDivergedError, mrr, recall_at_k, train

logger = logging.getLogger(__name__)

PLANS = ("original", "remove_random", "add_random", "remove_filter", "add_breaking", "remove_and_add")


@dataclass(frozen=True)
class ModificationPlan:
    name: str
    seed: int = 0

    def __post_init__(self) -> None:
        if self.name not in PLANS:
            raise ValueError(f"unknown plan {self.name!r}; expected one of {PLANS}")


def apply_plan(n_train: int, categories: CategorizedDataset, plan: ModificationPlan) -> np.ndarray:
    """Indices into the original training set after the plan's removals and duplicates.

    Random baselines touch exactly as many points as the matching category
    (FilterBubble for removal, BreakingBubble for duplication).
    """
    if len(categories.labels) != n_train:
        raise ValueError("categories were computed on a different training set")
    filt = categories.indices(Category.FILTER)
    brk = categories.indices(Category.BREAKING)
    rng = np.random.default_rng(plan.seed)
    keep = np.arange(n_train)
    extra = np.zeros(0, dtype=np.int64)
    if plan.name == "remove_random":
        drop = rng.choice(n_train, size=len(filt), replace=False)
        keep = np.setdiff1d(keep, drop)
    elif plan.name == "add_random":
        extra = np.sort(rng.choice(n_train, size=len(brk), replace=False))
    if plan.name in ("remove_filter", "remove_and_add"):
        keep = np.setdiff1d(keep, filt)
    if plan.name in ("add_breaking", "remove_and_add"):
        extra = brk
    return np.concatenate([keep, extra]).astype(np.int64)


@dataclass
class RunRow:
    plan: str
    run: int
    seed: int
    n_train: int
    recall_at_10: float
    mrr: float
    diversity: float
    diverged: bool = False


@dataclass
class ExperimentReport:
    rows: list[RunRow] = field(default_factory=list)

    def plan_rows(self, plan: str) -> list[RunRow]:
        return [r for r in self.rows if r.plan == plan and not r.diverged]

    def summary(self) -> dict:
        """Per-plan means and standard deviations plus diversity change vs original."""
        out: dict = {"plans": {}, "pairing": "retrain seed = base_seed + run index, shared across plans"}
        for plan in dict.fromkeys(r.plan for r in self.rows):
            rows = self.plan_rows(plan)
            stats = {"runs": len(rows), "diverged": sum(r.diverged for r in self.rows if r.plan == plan)}
            for metric in ("recall_at_10", "mrr", "diversity"):
                vals = np.array([getattr(r, metric) for r in rows])
                stats[f"{metric}_mean"] = float(vals.mean()) if len(vals) else float("nan")
                stats[f"{metric}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            out["plans"][plan] = stats
        base = out["plans"].get("original")
        if base:
            for plan, stats in out["plans"].items():
                stats["diversity_change_vs_original"] = (
                    stats["diversity_mean"] / base["diversity_mean"] - 1.0
                    if base["diversity_mean"] > 0
                    else float("nan")
                )
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["plan", "run", "seed", "n_train", "recall_at_10", "mrr", "diversity", "diverged"])
        for r in self.rows:
            w.writerow([r.plan, r.run, r.seed, r.n_train, f"{r.recall_at_10:.6f}", f"{r.mrr:.6f}", f"{r.diversity:.6f}", int(r.diverged)])
        for plan, s in self.summary()["plans"].items():
            for stat in ("mean", "std"):
                w.writerow([plan, stat, "", "", f"{s['recall_at_10_' + stat]:.6f}", f"{s['mrr_' + stat]:.6f}", f"{s['diversity_' + stat]:.6f}", ""])
        return buf.getvalue()


def run_experiment_suite(
    dataset: Dataset,
    community_map: Mapping[int, int],
    categories: CategorizedDataset,
    config: ModelConfig,
    hp: Hyperparams,
    plans: Sequence[str] = PLANS,
    retrains_per_plan: int = 10,
    base_seed: int = 0,
) -> ExperimentReport:
    """Retrain under each plan and score on the untouched test split."""
    train_ex = dataset.split("train")
    test_ex = dataset.split("test")
    X, y = examples_to_arrays(train_ex, config.lookback)
    Xt, yt = examples_to_arrays(test_ex, config.lookback)
    report = ExperimentReport()
    for name in plans:
        for run in range(retrains_per_plan):
            seed = base_seed + run
            idx = apply_plan(len(y), categories, ModificationPlan(name, seed))
            try:
                result = train(X[idx], y[idx], config, replace(hp, seed=seed))
            except TrainingDivergedError as exc:
                logger.warning("plan %s run %d diverged: %s", name, run, exc)
                report.rows.append(RunRow(name, run, seed, len(idx), float("nan"), float("nan"), float("nan"), True))
                continue
            p = result.params
            div = recommendation_diversity(p, test_ex, community_map)
            report.rows.append(
                RunRow(name, run, seed, len(idx), recall_at_k(p, Xt, yt, 10), mrr(p, Xt, yt), float(div.mean()))
            )
            logger.info("plan %s run %d: %s", name, run, report.rows[-1])
    return report
