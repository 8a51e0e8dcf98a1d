"""Point categories by history diversity: Diverse, FilterBubble, BreakingBubble, Other."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .diversity import items_to_communities, list_diversity
from .ingest import SequenceExample
from .model import ModelParams, pad_histories, predict_logits, rank_from_logits


class Category(str, Enum):
    DIVERSE = "Diverse"
    FILTER = "FilterBubble"
    BREAKING = "BreakingBubble"
    OTHER = "Other"
    RANDOM = "Random"


def nearest_rank(values: Sequence[float], q: float) -> float:
    """Nearest-rank quantile: the ceil(q*n)-th smallest value."""
    ordered = sorted(values)
    rank = max(1, math.ceil(q * len(ordered)))
    return ordered[rank - 1]


def bubble_relation(history: Sequence[int], item: int, community_map: Mapping[int, int]) -> Category:
    """FilterBubble if ``item`` is in a most-frequent history community,
    BreakingBubble if its community never occurs in the history, else Other."""
    counts = Counter(items_to_communities(history, community_map))
    comm = community_map[item]
    if comm not in counts:
        return Category.BREAKING
    if counts[comm] == max(counts.values()):
        return Category.FILTER
    return Category.OTHER


@dataclass
class CategorizedDataset:
    labels: list[Category]
    diversities: np.ndarray
    target_communities: list[int]
    low_cut: float
    high_cut: float

    def indices(self, category: Category) -> np.ndarray:
        return np.array([k for k, lab in enumerate(self.labels) if lab == category], dtype=np.int64)

    def counts(self) -> dict[str, int]:
        c = Counter(lab.value for lab in self.labels)
        return {cat.value: c.get(cat.value, 0) for cat in Category if cat != Category.RANDOM}


def band_cuts(diversities: Sequence[float], band: float) -> tuple[float, float]:
    return nearest_rank(diversities, band), nearest_rank(diversities, 1.0 - band)


def categorize_training(
    examples: Sequence[SequenceExample],
    community_map: Mapping[int, int],
    band: float = 0.125,
) -> CategorizedDataset:
    if len(examples) < 8:
        raise ValueError("need at least 8 examples to form diversity bands")
    div = np.array([list_diversity(ex.history, community_map) for ex in examples])
    low, high = band_cuts(div, band)
    labels = []
    for ex, d in zip(examples, div):
        if d >= high:
            labels.append(Category.DIVERSE)
        elif d <= low:
            labels.append(bubble_relation(ex.history, ex.target, community_map))
        else:
            labels.append(Category.OTHER)
    targets = [community_map[ex.target] for ex in examples]
    return CategorizedDataset(labels, div, targets, float(low), float(high))


@dataclass
class ValidationPoint:
    example: int
    item: int
    label: Category


@dataclass
class ValidationCategories:
    points: list[ValidationPoint]
    random_pool: list[ValidationPoint]
    low_cut: float

    def of(self, category: Category) -> list[ValidationPoint]:
        if category == Category.RANDOM:
            return self.random_pool
        return [p for p in self.points if p.label == category]


def categorize_validation(
    params: ModelParams,
    examples: Sequence[SequenceExample],
    community_map: Mapping[int, int],
    band: float = 0.125,
    top_k: int = 10,
    random_pool_size: int | None = None,
    seed: int | np.random.Generator = 0,
) -> ValidationCategories:
    """Pair each bottom-band validation history with each of its top-k predictions.

    The random control pool samples (example, prediction) pairs uniformly from
    every example's top-k, without replacement.
    """
    div = np.array([list_diversity(ex.history, community_map) for ex in examples])
    low = nearest_rank(div, band)
    X = pad_histories([ex.history for ex in examples], params.config.lookback)
    top = rank_from_logits(predict_logits(params, X), top=top_k)
    points = []
    for k, ex in enumerate(examples):
        if div[k] > low:
            continue
        for item in top[k].tolist():
            rel = bubble_relation(ex.history, item, community_map)
            if rel != Category.OTHER:
                points.append(ValidationPoint(k, item, rel))
    rng = np.random.default_rng(seed)
    n_pairs = top.size
    size = n_pairs if random_pool_size is None else min(random_pool_size, n_pairs)
    flat = np.sort(rng.choice(n_pairs, size=size, replace=False))
    pool = [
        ValidationPoint(int(f // top.shape[1]), int(top.flat[f]), Category.RANDOM) for f in flat
    ]
    return ValidationCategories(points, pool, float(low))


def training_categories_csv(examples: Sequence[SequenceExample], cats: CategorizedDataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["example_id", "label", "history_diversity", "target_community"])
    for k, (lab, d, tc) in enumerate(zip(cats.labels, cats.diversities, cats.target_communities)):
        w.writerow([k, lab.value, f"{d:.10f}", tc])
    return buf.getvalue()


def validation_categories_csv(vc: ValidationCategories, community_map: Mapping[int, int]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["example_id", "predicted_item", "label", "item_community"])
    for p in vc.points + vc.random_pool:
        w.writerow([p.example, p.item, p.label.value, community_map[p.item]])
    return buf.getvalue()


def read_training_labels(text: str) -> list[Category]:
    return [Category(row["label"]) for row in csv.DictReader(io.StringIO(text))]
