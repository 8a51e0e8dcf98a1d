import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bubbletrace.diversity import (
    bubble_csv,
    bubble_report,
    gini_simpson,
    items_to_communities,
    list_diversity,
    recommendation_diversity,
)
from bubbletrace.ingest import SequenceExample
from bubbletrace.model import ModelConfig, ModelParams

from .oracles import pair_sampling_diversity


@pytest.mark.parametrize(
    "labels, expected",
    [(list("aaaa"), 0.0), (list("ab"), 0.5), (list("aabc"), 0.625)],
)
def test_gini_simpson_examples(labels, expected):
    score = gini_simpson(labels)
    assert score.value == pytest.approx(expected, abs=1e-12)
    assert score.list_length == len(labels)


def test_gini_simpson_empty_rejected():
    with pytest.raises(ValueError):
        gini_simpson([])


def test_gini_simpson_matches_pair_sampling():
    rng = np.random.default_rng(0)
    for _ in range(5):
        labels = rng.integers(0, rng.integers(1, 9), size=rng.integers(1, 40))
        mc = pair_sampling_diversity(labels, 200_000, rng)
        assert gini_simpson(labels.tolist()).value == pytest.approx(mc, abs=1e-2)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=30), st.randoms(use_true_random=False))
def test_gini_simpson_permutation_invariant_and_bounded(labels, rnd):
    shuffled = list(labels)
    rnd.shuffle(shuffled)
    v = gini_simpson(labels).value
    assert v == pytest.approx(gini_simpson(shuffled).value, abs=1e-12)
    k = len(set(labels))
    assert 0.0 <= v <= 1.0 - 1.0 / k + 1e-12


@pytest.mark.parametrize("k", [1, 2, 5, 13])
def test_gini_simpson_uniform_reaches_bound(k):
    assert gini_simpson(list(range(k)) * 3).value == pytest.approx(1 - 1 / k, abs=1e-12)


def test_items_to_communities():
    assert items_to_communities([1, 2, 1], {1: "A", 2: "B"}) == ["A", "B", "A"]
    with pytest.raises(KeyError, match="7"):
        items_to_communities([1, 7], {1: "A"})


def one_community_model(n_items, favoured, lookback=4):
    """Zero weights with output bias ranking ``favoured`` items first."""
    cfg = ModelConfig(n_items=n_items, embedding_dim=2, hidden_dim=2, lookback=lookback)
    p = ModelParams.zeros(cfg)
    p.output_bias[list(favoured)] = 10.0
    return p


def test_bubble_report_degenerate_model_narrows_every_mixed_history():
    cmap = {i: (i - 1) // 4 for i in range(1, 13)}  # three communities of four items
    p = one_community_model(12, [1, 2, 3, 4])
    histories = [(1, 5, 9, 2), (5, 9, 6, 10), (3, 7, 11, 12)]
    ex = [SequenceExample("u", h, 1, "test") for h in histories]
    (row,) = bubble_report(p, ex, cmap, [4])
    assert row.frac_less_diverse == 1.0
    assert row.frac_more_diverse == 0.0
    assert row.mean_rec_div == 0.0
    assert row.n_examples == 3


def test_bubble_report_lookback_one_and_bounds():
    cmap = {i: i % 3 for i in range(1, 10)}
    rng = np.random.default_rng(1)
    ex = [SequenceExample("u", tuple(rng.integers(1, 10, size=4).tolist()), 1, "test") for _ in range(6)]
    cfg = ModelConfig(n_items=9, embedding_dim=3, hidden_dim=2, lookback=4)
    p = ModelParams.initialize(cfg, np.random.default_rng(0))
    (row,) = bubble_report(p, ex, cmap, [1])
    assert row.frac_less_diverse == 0.0 and row.frac_more_diverse == 0.0
    assert row.mean_history_div == 0.0 and row.mean_rec_div == 0.0
    with pytest.raises(ValueError):
        bubble_report(p, ex, cmap, [0])
    with pytest.raises(ValueError):
        bubble_report(p, ex, cmap, [51])


def test_bubble_report_skips_short_histories():
    cmap = {i: i % 2 for i in range(1, 5)}
    p = one_community_model(4, [2])
    ex = [SequenceExample("u", (1, 2), 3, "test")]
    (row,) = bubble_report(p, ex, cmap, [3])
    assert row.n_examples == 0 and np.isnan(row.frac_less_diverse)
    assert bubble_csv([row]).splitlines()[0].startswith("lookback,")


def test_recommendation_diversity_uses_history_length():
    cmap = {i: (i - 1) // 2 for i in range(1, 9)}  # pairs share a community
    p = ModelParams.zeros(ModelConfig(n_items=8, embedding_dim=2, hidden_dim=2, lookback=4))
    p.output_bias[1:] = np.arange(8, 0, -1)  # ranking 1, 2, 3, ...
    ex = [
        SequenceExample("u", (5,), 1, "test"),
        SequenceExample("u", (5, 6), 1, "test"),
        SequenceExample("u", (5, 6, 7, 8), 1, "test"),
    ]
    got = recommendation_diversity(p, ex, cmap)
    expected = [list_diversity([1], cmap), list_diversity([1, 2], cmap), list_diversity([1, 2, 3, 4], cmap)]
    np.testing.assert_allclose(got, expected, atol=1e-12)
    assert got.tolist() == [0.0, 0.0, 0.5]
