"""Batched TracIn over saved checkpoints and the influence experiments built on it."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import betainc

from .category import Category
from .model import Checkpoint, backward

logger = logging.getLogger(__name__)

TRAIN_CATEGORIES = (Category.RANDOM, Category.DIVERSE, Category.FILTER, Category.BREAKING)
VALIDATION_CATEGORIES = (Category.RANDOM, Category.BREAKING, Category.FILTER)


@dataclass(frozen=True)
class TTestResult:
    t_statistic: float
    degrees_of_freedom: float
    p_value: float
    two_sided: bool = True


def student_t_sf2(t: float, df: float) -> float:
    """Two-sided tail probability P(|T| >= |t|) for Student's t."""
    if math.isinf(t):
        return 0.0
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def welch_t_test(sample_a: Sequence[float], sample_b: Sequence[float]) -> TTestResult:
    """Two-sided Welch test with Welch-Satterthwaite degrees of freedom."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each sample needs at least two values")
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0.0:
        if diff == 0.0:
            return TTestResult(0.0, float(len(a) + len(b) - 2), 1.0)
        raise ValueError("both samples are constant with different means; t is undefined")
    t = diff / math.sqrt(se2)
    df = se2 * se2 / (va * va / (len(a) - 1) + vb * vb / (len(b) - 1))
    return TTestResult(float(t), float(df), student_t_sf2(t, df))


@dataclass
class GradientBatch:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        if len(self.X) == 0 or len(self.X) != len(self.y):
            raise ValueError("a gradient batch needs matching, non-empty X and y")

    @property
    def size(self) -> int:
        return len(self.y)


def batch_gradient(checkpoint: Checkpoint, batch: GradientBatch) -> np.ndarray:
    """Flattened gradient of the batch's mean loss at the checkpoint's weights."""
    return backward(checkpoint.params, batch.X, batch.y)[1].flat()


def tracin_batched(
    checkpoints: Sequence[Checkpoint],
    z: GradientBatch,
    z_prime: GradientBatch,
    reduce: str = "mean",
) -> float:
    """(1/b) * lr_i * <grad(z), grad(z')> at each checkpoint, averaged (or summed)."""
    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    if z.size != z_prime.size:
        raise ValueError(f"batch sizes differ: {z.size} vs {z_prime.size}")
    n_params = checkpoints[0].params.n_params
    scores = []
    for ck in checkpoints:
        if ck.params.n_params != n_params:
            raise ValueError("checkpoints have different parameter counts")
        g = batch_gradient(ck, z)
        gp = g if z_prime is z else batch_gradient(ck, z_prime)
        scores.append(ck.learning_rate * float(g @ gp) / z.size)
    return float(np.sum(scores) if reduce == "sum" else np.mean(scores))


def select_checkpoints(checkpoints: Sequence[Checkpoint], include_initial: bool = False) -> list[Checkpoint]:
    chosen = [c for c in checkpoints if include_initial or c.epoch > 0]
    if not chosen:
        raise ValueError("no checkpoints left after excluding the initial one")
    return chosen


@dataclass
class SelfVsRandomResult:
    test: TTestResult
    mean_self: float
    mean_random: float
    self_series: list[float]
    random_series: list[float]

    def to_json(self) -> dict:
        return {
            "mean_self": self.mean_self,
            "mean_random": self.mean_random,
            "t": self.test.t_statistic,
            "df": self.test.degrees_of_freedom,
            "p": self.test.p_value,
            "self_series": self.self_series,
            "random_series": self.random_series,
        }


def self_vs_random_experiment(
    checkpoints: Sequence[Checkpoint],
    X: np.ndarray,
    y: np.ndarray,
    subset_size: int = 3000,
    repetitions: int = 20,
    batch_size: int = 256,
    seed: int | np.random.Generator = 0,
) -> SelfVsRandomResult:
    """Per repetition: batch a random subset, score each batch against itself
    and against an equally sized batch drawn from the rest of the training set."""
    n = len(y)
    if subset_size > n:
        logger.warning("subset_size %d clipped to training size %d", subset_size, n)
        subset_size = n
    batch_size = min(batch_size, subset_size)
    rng = np.random.default_rng(seed)
    self_series, random_series = [], []
    for _ in range(repetitions):
        perm = rng.permutation(n)
        subset, rest = perm[:subset_size], perm[subset_size:]
        self_scores, rand_scores = [], []
        for start in range(0, subset_size - batch_size + 1, batch_size):
            idx = subset[start : start + batch_size]
            pool = rest if len(rest) >= batch_size else np.setdiff1d(np.arange(n), idx)
            if len(pool) < batch_size:
                pool = np.arange(n)
            other = rng.choice(pool, size=batch_size, replace=False)
            zb = GradientBatch(X[idx], y[idx])
            self_scores.append(tracin_batched(checkpoints, zb, zb))
            rand_scores.append(tracin_batched(checkpoints, zb, GradientBatch(X[other], y[other])))
        self_series.append(float(np.mean(self_scores)))
        random_series.append(float(np.mean(rand_scores)))
    test = welch_t_test(self_series, random_series)
    return SelfVsRandomResult(
        test, float(np.mean(self_series)), float(np.mean(random_series)), self_series, random_series
    )


@dataclass
class InfluenceResult:
    train_category: Category
    validation_category: Category
    per_repetition_means: list[float]

    @property
    def grand_mean(self) -> float:
        return float(np.mean(self.per_repetition_means))

    @property
    def n_repetitions(self) -> int:
        return len(self.per_repetition_means)

    @property
    def name(self) -> str:
        return f"{self.train_category.value}->{self.validation_category.value}"


@dataclass
class CrossCategoryResult:
    cells: list[InfluenceResult]
    p_matrix: np.ndarray
    names: list[str] = field(default_factory=list)

    def cell(self, train: Category, val: Category) -> InfluenceResult:
        for c in self.cells:
            if c.train_category == train and c.validation_category == val:
                return c
        raise KeyError((train, val))


def cross_category_experiment(
    checkpoints: Sequence[Checkpoint],
    train_pools: dict[Category, tuple[np.ndarray, np.ndarray]],
    val_pools: dict[Category, tuple[np.ndarray, np.ndarray]],
    samples_per_category: int = 100,
    repetitions: int = 25,
    batch_size: int = 4096,
    seed: int | np.random.Generator = 0,
) -> CrossCategoryResult:
    """Influence of every training category on every validation category.

    Each pool maps a category to its ``(X, y)`` points. Per repetition and
    cell, ``samples_per_category`` points are drawn from each side and scored
    with :func:`tracin_batched`; the pairwise Welch p-values over the
    repetition series form the heatmap matrix.
    """
    for side, pools, wanted in (("training", train_pools, TRAIN_CATEGORIES), ("validation", val_pools, VALIDATION_CATEGORIES)):
        for cat in wanted:
            if cat not in pools or len(pools[cat][1]) == 0:
                raise ValueError(f"{side} category {cat.value} is empty")
    b = min(samples_per_category, batch_size)
    if b < samples_per_category:
        logger.warning("batch_size %d smaller than samples_per_category %d", batch_size, samples_per_category)
    rng = np.random.default_rng(seed)
    cells = []
    for tc in TRAIN_CATEGORIES:
        for vc in VALIDATION_CATEGORIES:
            means = []
            for _ in range(repetitions):
                zt = _draw(train_pools[tc], b, rng)
                zv = _draw(val_pools[vc], b, rng)
                means.append(tracin_batched(checkpoints, zt, zv))
            cells.append(InfluenceResult(tc, vc, means))
    n = len(cells)
    p = np.ones((n, n))
    for i, j in itertools.combinations(range(n), 2):
        try:
            p[i, j] = p[j, i] = welch_t_test(cells[i].per_repetition_means, cells[j].per_repetition_means).p_value
        except ValueError:
            p[i, j] = p[j, i] = float("nan")
    return CrossCategoryResult(cells, p, [c.name for c in cells])


def _draw(pool: tuple[np.ndarray, np.ndarray], size: int, rng: np.random.Generator) -> GradientBatch:
    X, y = pool
    # small categories are sampled with replacement so every batch has the same size
    idx = rng.choice(len(y), size=size, replace=len(y) < size)
    return GradientBatch(X[idx], y[idx])


def influence_matrix_csv(result: CrossCategoryResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["train_category", "val_category", "rep_index", "mean_influence"])
    for c in result.cells:
        for r, v in enumerate(c.per_repetition_means):
            w.writerow([c.train_category.value, c.validation_category.value, r, repr(v)])
    return buf.getvalue()


def heatmap_csv(result: CrossCategoryResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["combo_a", "combo_b", "p_value"])
    for i, a in enumerate(result.names):
        for j, b in enumerate(result.names):
            w.writerow([a, b, repr(float(result.p_matrix[i, j]))])
    return buf.getvalue()
