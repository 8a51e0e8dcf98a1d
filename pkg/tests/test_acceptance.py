"""Acceptance gate: one test per criterion, each printing a single PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines; criteria 6-8
are marked slow because they train real models.
"""

import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
import yaml
from sklearn.metrics import normalized_mutual_info_score

from bubbletrace.category import Category, categorize_training, categorize_validation
from bubbletrace.cli import main as cli_main
from bubbletrace.community import community_sweep, louvain
from bubbletrace.diversity import gini_simpson
from bubbletrace.influence import (
    TRAIN_CATEGORIES,
    VALIDATION_CATEGORIES,
    GradientBatch,
    cross_category_experiment,
    select_checkpoints,
    self_vs_random_experiment,
    tracin_batched,
    welch_t_test,
)
from bubbletrace.ingest import build_dataset, examples_to_arrays, filter_dataset, generate_synthetic
from bubbletrace.model import Checkpoint, Hyperparams, ModelConfig, ModelParams, forward, mrr, recall_at_k, train
from bubbletrace.modify import run_experiment_suite

from .oracles import best_partition, brute_rank, pair_sampling_diversity, welch_p_quadrature
from .test_community import TRIANGLES, planted_graph
from .test_influence import WELCH_CASES
from .test_model import finite_difference_error

# Desk-scale synthetic setup shared by criteria 6-8.
SYNTH = dict(n_users=500, n_items=120, n_communities=8, bubble_strength=0.8, records_per_user=12)
DATA_SEED = 7
LOOKBACK = 12
MODEL = dict(embedding_dim=32, hidden_dim=16, lookback=LOOKBACK)
HP = dict(batch_size=64, epochs=100, learning_rate=0.02, momentum=0.9, checkpoint_interval=20)
COMMUNITY_THRESHOLD = 10


VERDICTS = {}


def verdict(n, ok, detail):
    line = f"[ACCEPTANCE {n}] {'PASS' if ok else 'FAIL'} {detail}"
    VERDICTS[n] = line
    print("\n" + line)
    assert ok, f"criterion {n} failed: {detail}"


def test_criterion_01_gradient_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for k in range(10):
        cfg = ModelConfig(
            n_items=int(rng.integers(2, 10)),
            embedding_dim=int(rng.integers(1, 9)),
            hidden_dim=int(rng.integers(1, 5)),
            lookback=int(rng.integers(1, 7)),
            flatten=bool(k % 2),
        )
        worst = max(worst, finite_difference_error(cfg, seed=k))
    elapsed = time.perf_counter() - start
    verdict(1, worst < 1e-5 and elapsed < 30, f"max relative error {worst:.2e} over 10 models in {elapsed:.1f}s")


def test_criterion_02_louvain_oracle():
    start = time.perf_counter()
    cmap = louvain(TRIANGLES, seed=0)
    _, best_q = best_partition(TRIANGLES.nodes, TRIANGLES.edges)
    a = cmap.assignment
    optimal = (
        abs(cmap.modularity_score - 0.5) <= 1e-9
        and abs(best_q - 0.5) <= 1e-9
        and a[0] == a[1] == a[2] != a[3] == a[4] == a[5]
    )
    good = 0
    scores = []
    for seed in range(10):
        g, truth = planted_graph(seed)
        found = louvain(g, seed=seed).assignment
        nmi = normalized_mutual_info_score(truth, [found[k] for k in g.nodes])
        scores.append(nmi)
        good += nmi >= 0.9
    elapsed = time.perf_counter() - start
    verdict(
        2,
        optimal and good >= 9 and elapsed < 60,
        f"two-triangle Q={cmap.modularity_score:.12f} (exhaustive best {best_q:.12f}); "
        f"planted NMI>=0.9 in {good}/10 (min {min(scores):.3f}) in {elapsed:.1f}s",
    )


def test_criterion_03_gini_simpson():
    exact = [
        (list("aaaa"), 0.0),
        (list("ab"), 0.5),
        (list("aabc"), 0.625),
    ]
    exact_ok = all(abs(gini_simpson(lab).value - v) <= 1e-12 for lab, v in exact)
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        k = int(rng.integers(1, 12))
        labels = rng.integers(0, k, size=int(rng.integers(1, 60)))
        mc = pair_sampling_diversity(labels, 10**6, rng)
        worst = max(worst, abs(gini_simpson(labels.tolist()).value - mc))
    verdict(3, exact_ok and worst < 1e-2, f"examples exact={exact_ok}; max |exact - MC(1e6)| = {worst:.2e} over 20 lists")


def test_criterion_04_welch():
    worst = 0.0
    for a, b in WELCH_CASES:
        worst = max(worst, abs(welch_t_test(a, b).p_value - welch_p_quadrature(a, b)[2]))
    hand = welch_t_test([1, 2, 3, 4, 5], [2, 3, 4, 5, 6])
    hand_ok = abs(hand.t_statistic + 1) < 1e-12 and abs(hand.degrees_of_freedom - 8) < 1e-12 and abs(hand.p_value - 0.3466) < 5e-5
    verdict(
        4,
        worst < 1e-6 and hand_ok and len(WELCH_CASES) == 10,
        f"max |p - oracle| = {worst:.2e} on {len(WELCH_CASES)} cases; derived case t={hand.t_statistic}, df={hand.degrees_of_freedom}, p={hand.p_value:.6f}",
    )


def test_criterion_05_tracin_identities(monkeypatch):
    cfg = ModelConfig(n_items=9, embedding_dim=4, hidden_dim=3, lookback=5)
    rng = np.random.default_rng(5)

    def ck(seed, lr):
        return Checkpoint(ModelParams.initialize(cfg, np.random.default_rng(seed)), lr, 1, {})

    def batch():
        return GradientBatch(rng.integers(0, 10, size=(6, 5)), rng.integers(1, 10, size=6))

    cks = [ck(1, 0.1), ck(2, 0.03), ck(3, 0.2)]
    z, zp = batch(), batch()
    ab, ba = tracin_batched(cks, z, zp), tracin_batched(cks, zp, z)
    symmetric = abs(ab - ba) <= 1e-12
    scaled = [Checkpoint(c.params, 2.5 * c.learning_rate, 1, {}) for c in cks]
    linear = abs(tracin_batched(scaled, z, zp) - 2.5 * ab) <= 1e-12
    self_ok = all(tracin_batched([c], z, z) >= 0 for c in cks)

    from bubbletrace import influence

    c0, c1 = ck(4, 0.1), ck(5, 0.1)
    z2, zp2 = GradientBatch(z.X[:2], z.y[:2]), GradientBatch(zp.X[:2], zp.y[:2])
    grads = {(id(c0), id(z2)): np.array([1.0, 1.0]), (id(c0), id(zp2)): np.array([1.0, 1.0]),
             (id(c1), id(z2)): np.array([2.0, 0.0]), (id(c1), id(zp2)): np.array([2.0, 5.0])}
    monkeypatch.setattr(influence, "batch_gradient", lambda c, b: grads[(id(c), id(b))])
    derived = tracin_batched([c0, c1], z2, zp2)
    derived_ok = abs(derived - 0.15) <= 1e-12
    verdict(
        5,
        symmetric and linear and self_ok and derived_ok,
        f"symmetry={symmetric} lr-linearity={linear} self>=0={self_ok} derived={derived!r}",
    )


def test_criterion_10_metric_oracles():
    rng = np.random.default_rng(10)
    mismatches = 0
    for case in range(50):
        V = int(rng.integers(2, 30))
        cfg = ModelConfig(n_items=V, embedding_dim=3, hidden_dim=2, lookback=4)
        params = ModelParams.zeros(cfg).map(lambda a: rng.normal(size=a.shape))
        if case % 3 == 0:  # coarse weights so ties show up
            params = params.map(lambda a: np.round(a))
        n = int(rng.integers(1, 20))
        X = rng.integers(0, V + 1, size=(n, 4))
        y = rng.integers(1, V + 1, size=n)
        logits = forward(params, X)
        ranks = [brute_rank(logits[k], int(y[k])) for k in range(n)]
        brute_mrr = float(np.mean(1.0 / np.array(ranks, dtype=np.float64)))
        brute_recall = float(np.mean(np.array(ranks) <= 10))
        exact_mrr = sum(Fraction(1, r) for r in ranks) / n
        got_mrr, got_recall = mrr(params, X, y), recall_at_k(params, X, y, 10)
        if got_mrr != brute_mrr or got_recall != brute_recall or abs(Fraction(got_mrr) - exact_mrr) > Fraction(1, 10**12):
            mismatches += 1
    verdict(10, mismatches == 0, f"{50 - mismatches}/50 cases match brute-force MRR and Recall@10 exactly")


DETERMINISM_CONFIG = {
    "seed": 11,
    "ingest": {
        "min_item_interactions": 1,
        "min_user_interactions": 10,
        "synthetic": {"n_users": 40, "n_items": 24, "n_communities": 4, "bubble_strength": 0.8, "records_per_user": 12},
    },
    "community": {"thresholds": [0, 5], "selected_threshold": 0},
    "model": {"embedding_dim": 8, "hidden_dim": 4, "lookback": 10, "batch_size": 32, "epochs": 6, "checkpoint_interval": 2, "learning_rate": 0.05},
    "bubble": {"lookbacks": [1, 5, 10]},
    "influence": {"subset_size": 40, "self_repetitions": 4, "self_batch_size": 8, "samples_per_category": 6, "cross_repetitions": 4},
    "modify": {"retrains_per_plan": 2},
}


def test_criterion_09_determinism(tmp_path):
    config = tmp_path / "config.yaml"
    config.write_text(yaml.safe_dump(DETERMINISM_CONFIG))
    roots = [tmp_path / "run_a", tmp_path / "run_b"]
    for ws in roots:
        cmds = [["ingest", "--synthetic"], ["communities"], ["train"], ["bubble"], ["influence"], ["modify"], ["report"]]
        for cmd in cmds:
            assert cli_main([*cmd, "--workspace", str(ws), "--config", str(config), "--seed", "42"]) == 0

    def files(root: Path):
        return {p.relative_to(root): p.read_bytes() for p in root.rglob("*") if p.is_file() and p.name != ".lock"}

    a, b = files(roots[0]), files(roots[1])
    differing = sorted(str(k) for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    n_ckpt = sum(1 for k in a if k.suffix == ".ckpt")
    verdict(
        9,
        not differing and n_ckpt >= 2,
        f"{len(a)} files incl. {n_ckpt} checkpoints byte-identical across two runs" if not differing else f"differing: {differing}",
    )


# ---------------------------------------------------------------- synthetic reproductions


@pytest.fixture(scope="module")
def synthetic_setup():
    raw = generate_synthetic(**SYNTH, seed=DATA_SEED)
    ds = build_dataset(raw, filter_dataset(raw, 10, 10), lookback=LOOKBACK)
    pairs = [(ds.raw_users[u], ds.raw_items[i]) for u, i in ds.raw_pairs.tolist()]
    _, maps = community_sweep(pairs, [COMMUNITY_THRESHOLD], seed=0)
    found = maps[COMMUNITY_THRESHOLD].assignment
    cmap = {ds.catalog.index(item): c for item, c in found.items() if item in ds.catalog}
    assert len(cmap) == ds.n_items
    return ds, cmap


@pytest.fixture(scope="module")
def trained(synthetic_setup):
    ds, cmap = synthetic_setup
    X, y = examples_to_arrays(ds.split("train"), LOOKBACK)
    start = time.perf_counter()
    result = train(X, y, ModelConfig(n_items=ds.n_items, **MODEL), Hyperparams(**HP, seed=1))
    return result, X, y, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_06_self_vs_random(trained):
    result, X, y, train_time = trained
    start = time.perf_counter()
    cks = select_checkpoints(result.checkpoints)
    res = self_vs_random_experiment(cks, X, y, subset_size=3000, repetitions=20, batch_size=256, seed=3)
    elapsed = train_time + time.perf_counter() - start
    ok = len(cks) >= 5 and res.mean_self > res.mean_random and res.test.p_value < 0.01 and elapsed < 15 * 60
    verdict(
        6,
        ok,
        f"self {res.mean_self:.4e} vs random {res.mean_random:.4e}, Welch p={res.test.p_value:.3g}, "
        f"{len(cks)} checkpoints, {elapsed:.0f}s",
    )


@pytest.mark.slow
def test_criterion_07_cross_category(synthetic_setup, trained):
    ds, cmap = synthetic_setup
    result, X, y, train_time = trained
    start = time.perf_counter()
    cks = select_checkpoints(result.checkpoints)
    train_cats = categorize_training(ds.split("train"), cmap)
    val_ex = ds.split("validation")
    Xv, _ = examples_to_arrays(val_ex, LOOKBACK)
    val_cats = categorize_validation(result.params, val_ex, cmap, seed=4)
    train_pools = {Category.RANDOM: (X, y)}
    for c in TRAIN_CATEGORIES[1:]:
        idx = train_cats.indices(c)
        train_pools[c] = (X[idx], y[idx])
    val_pools = {}
    for c in VALIDATION_CATEGORIES:
        pts = val_cats.of(c)
        val_pools[c] = (Xv[[p.example for p in pts]], np.array([p.item for p in pts], dtype=np.int64))
    res = cross_category_experiment(cks, train_pools, val_pools, samples_per_category=100, repetitions=25, batch_size=4096, seed=5)
    elapsed = train_time + time.perf_counter() - start
    rr = res.cell(Category.RANDOM, Category.RANDOM)
    parts = []
    ok = elapsed < 20 * 60
    for tc in (Category.BREAKING, Category.DIVERSE):
        cell = res.cell(tc, Category.BREAKING)
        p = welch_t_test(cell.per_repetition_means, rr.per_repetition_means).p_value
        ok &= cell.grand_mean > rr.grand_mean and p < 0.05
        parts.append(f"{cell.name} {cell.grand_mean:.3e} (p={p:.3g})")
    verdict(7, ok, f"{'; '.join(parts)} vs Random->Random {rr.grand_mean:.3e}; {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_08_mitigation(synthetic_setup):
    ds, cmap = synthetic_setup
    start = time.perf_counter()
    cats = categorize_training(ds.split("train"), cmap)
    report = run_experiment_suite(
        ds, cmap, cats, ModelConfig(n_items=ds.n_items, **MODEL), Hyperparams(**HP),
        plans=["original", "add_breaking", "remove_and_add"], retrains_per_plan=10, base_seed=0,
    )
    elapsed = time.perf_counter() - start
    s = report.summary()["plans"]
    div = {p: s[p]["diversity_mean"] for p in s}
    gain = div["remove_and_add"] / div["original"] - 1
    drop = s["original"]["recall_at_10_mean"] - s["remove_and_add"]["recall_at_10_mean"]
    ok = (
        all(s[p]["runs"] == 10 for p in s)
        and div["remove_and_add"] > div["add_breaking"] > div["original"]
        and gain >= 0.20
        and drop <= 0.06
        and elapsed < 45 * 60
    )
    verdict(
        8,
        ok,
        f"diversity original {div['original']:.4f} < add_breaking {div['add_breaking']:.4f} < remove_and_add {div['remove_and_add']:.4f} "
        f"(gain {gain:+.1%}); Recall@10 drop {drop:.4f}; {elapsed:.0f}s",
    )
