"""Gini-Simpson diversity and history-vs-recommendation bubble analysis."""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Mapping, Sequence

import numpy as np

from .ingest import SequenceExample
from .model import ModelParams, pad_histories, predict_logits, rank_from_logits


@dataclass(frozen=True)
class DiversityScore:
    value: float
    list_length: int


def gini_simpson(labels: Sequence[Hashable]) -> DiversityScore:
    """1 - sum of squared label proportions: chance two draws (with replacement) differ."""
    n = len(labels)
    if n == 0:
        raise ValueError("gini_simpson needs at least one label")
    counts = np.fromiter(Counter(labels).values(), dtype=np.float64)
    value = 1.0 - float(np.sum((counts / n) ** 2))
    # guards the tiny negative that rounding can leave for a single label
    return DiversityScore(max(0.0, value), n)


def items_to_communities(items: Sequence[int], community_map: Mapping[int, int]) -> list[int]:
    if len(items) == 0:
        raise ValueError("item list is empty")
    out = []
    for item in items:
        try:
            out.append(community_map[item])
        except KeyError:
            raise KeyError(f"item {item!r} has no community") from None
    return out


def list_diversity(items: Sequence[int], community_map: Mapping[int, int]) -> float:
    return gini_simpson(items_to_communities(items, community_map)).value


@dataclass
class BubbleRow:
    lookback: int
    frac_less_diverse: float
    frac_more_diverse: float
    mean_history_div: float
    mean_rec_div: float
    n_examples: int


def bubble_report(
    params: ModelParams,
    examples: Sequence[SequenceExample],
    community_map: Mapping[int, int],
    lookbacks: Sequence[int],
) -> list[BubbleRow]:
    """Compare each truncated history with the equally long top of its ranking."""
    rows = []
    for L in lookbacks:
        if not 1 <= L <= 50:
            raise ValueError(f"lookback {L} outside [1, 50]")
        chosen = [ex for ex in examples if ex.history_len >= L]
        if not chosen:
            rows.append(BubbleRow(L, float("nan"), float("nan"), float("nan"), float("nan"), 0))
            continue
        histories = [ex.history[-L:] for ex in chosen]
        logits = predict_logits(params, pad_histories(histories, params.config.lookback))
        recs = rank_from_logits(logits, top=L)
        hist_div = np.array([list_diversity(h, community_map) for h in histories])
        rec_div = np.array([list_diversity(r.tolist(), community_map) for r in recs])
        rows.append(
            BubbleRow(
                lookback=L,
                frac_less_diverse=float(np.mean(rec_div < hist_div)),
                frac_more_diverse=float(np.mean(rec_div > hist_div)),
                mean_history_div=float(hist_div.mean()),
                mean_rec_div=float(rec_div.mean()),
                n_examples=len(chosen),
            )
        )
    return rows


def recommendation_diversity(
    params: ModelParams,
    examples: Sequence[SequenceExample],
    community_map: Mapping[int, int],
    cap: int = 50,
) -> np.ndarray:
    """Gini-Simpson of the top-m recommendations with m = min(history length, cap)."""
    X = pad_histories([ex.history for ex in examples], params.config.lookback)
    ranked = rank_from_logits(predict_logits(params, X), top=cap)
    return np.array(
        [
            list_diversity(ranked[k, : min(ex.history_len, cap)].tolist(), community_map)
            for k, ex in enumerate(examples)
        ]
    )


def bubble_csv(rows: Sequence[BubbleRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lookback", "frac_less_diverse", "frac_more_diverse", "mean_history_div", "mean_rec_div", "n_examples"])
    for r in rows:
        w.writerow(
            [r.lookback, f"{r.frac_less_diverse:.6f}", f"{r.frac_more_diverse:.6f}",
             f"{r.mean_history_div:.6f}", f"{r.mean_rec_div:.6f}", r.n_examples]
        )
    return buf.getvalue()
