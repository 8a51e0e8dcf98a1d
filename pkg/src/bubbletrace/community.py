"""Item communities: bipartite graph, weighted item projection and Louvain."""

from __future__ import annotations

import csv
import io
import json
import statistics
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

Node = Hashable
PROJECTION_STRATEGIES = ("sum", "count", "min")


@dataclass
class BipartiteGraph:
    users: set
    items: set
    # (user, item) -> interaction count
    edges: dict = field(default_factory=dict)

    def item_degree(self, weighted: bool = True) -> dict:
        deg = dict.fromkeys(self.items, 0)
        for (_, item), w in self.edges.items():
            deg[item] += w if weighted else 1
        return deg


@dataclass
class ItemGraph:
    nodes: list
    # (a, b) with a < b -> weight
    edges: dict = field(default_factory=dict)

    def weight(self, a: Node, b: Node) -> float:
        key = (a, b) if a <= b else (b, a)
        return self.edges.get(key, 0)

    def adjacency(self) -> dict:
        adj: dict = {n: {} for n in self.nodes}
        for (a, b), w in self.edges.items():
            adj[a][b] = adj[a].get(b, 0) + w
            adj[b][a] = adj[b].get(a, 0) + w
        return adj

    @property
    def total_weight(self) -> float:
        return float(sum(self.edges.values()))


@dataclass
class CommunityMap:
    assignment: dict
    n_communities: int
    modularity_score: float

    def sizes(self) -> list[int]:
        counts = np.bincount(list(self.assignment.values()), minlength=self.n_communities)
        return counts.tolist()


def build_bipartite(pairs: Iterable) -> BipartiteGraph:
    """Edge weight = number of times the (user, item) interaction occurs.

    Accepts ``(user, item)`` tuples or objects with ``user_id``/``item_id``.
    """
    g = BipartiteGraph(set(), set(), {})
    for p in pairs:
        user, item = (p.user_id, p.item_id) if hasattr(p, "user_id") else p
        g.users.add(user)
        g.items.add(item)
        g.edges[(user, item)] = g.edges.get((user, item), 0) + 1
    return g


def degree_filter(graph: BipartiteGraph, min_item_degree: int, weighted: bool = True) -> BipartiteGraph:
    """Drop items whose degree is below the threshold; users stay even if isolated."""
    if min_item_degree < 0:
        raise ValueError("min_item_degree must be >= 0")
    deg = graph.item_degree(weighted)
    keep = {i for i, d in deg.items() if d >= min_item_degree}
    edges = {(u, i): w for (u, i), w in graph.edges.items() if i in keep}
    return BipartiteGraph(set(graph.users), keep, edges)


def project_items(graph: BipartiteGraph, strategy: str = "sum") -> ItemGraph:
    """Connect items that share a user.

    ``sum``: weight = sum over shared users of w(u,i) + w(u,j);
    ``count``: number of shared users; ``min``: sum of min(w(u,i), w(u,j)).
    """
    if strategy not in PROJECTION_STRATEGIES:
        raise ValueError(f"unknown projection strategy {strategy!r}")
    by_user: dict = defaultdict(list)
    for (u, i), w in graph.edges.items():
        by_user[u].append((i, w))
    edges: dict = defaultdict(int)
    for neigh in by_user.values():
        neigh.sort()
        for x in range(len(neigh)):
            a, wa = neigh[x]
            for y in range(x + 1, len(neigh)):
                b, wb = neigh[y]
                if strategy == "sum":
                    edges[(a, b)] += wa + wb
                elif strategy == "count":
                    edges[(a, b)] += 1
                else:
                    edges[(a, b)] += min(wa, wb)
    return ItemGraph(sorted(graph.items), dict(edges))


def modularity(graph: ItemGraph, assignment: Mapping, resolution: float = 1.0) -> float:
    """Weighted Newman modularity Q of a partition."""
    m = graph.total_weight
    if m <= 0:
        raise ValueError("modularity is undefined on a graph without edges")
    missing = [n for n in graph.nodes if n not in assignment]
    if missing:
        raise ValueError(f"assignment does not cover node {missing[0]!r}")
    internal: dict = defaultdict(float)
    strength: dict = defaultdict(float)
    for (a, b), w in graph.edges.items():
        ca, cb = assignment[a], assignment[b]
        strength[ca] += w
        strength[cb] += w
        if ca == cb:
            internal[ca] += w
    return sum(
        internal[c] / m - resolution * (strength[c] / (2 * m)) ** 2 for c in strength
    )


def _local_moves(adj: dict, k: dict, order: list, resolution: float, m2: float) -> tuple[dict, bool]:
    """Greedy node moves on one level until a full pass changes nothing."""
    # community id = rank of the founding node, so "lowest id" ties are deterministic
    comm = {n: idx for idx, n in enumerate(sorted(adj))}
    tot = {comm[n]: k[n] for n in adj}
    moved_any = False
    moved = True
    while moved:
        moved = False
        for node in order:
            ki = k[node]
            own = comm[node]
            links: dict = defaultdict(float)
            for nb, w in adj[node].items():
                if nb != node:
                    links[comm[nb]] += w
            tot[own] -= ki
            gains = {c: links[c] - resolution * tot[c] * ki / m2 for c in links}
            stay = links.get(own, 0.0) - resolution * tot[own] * ki / m2
            best = own
            if gains:
                top = max(gains.values())
                tol = 1e-12 * max(1.0, abs(top))
                if top > stay + tol:
                    best = min(c for c, g in gains.items() if g >= top - tol)
            tot[best] += ki
            if best != own:
                comm[node] = best
                moved = moved_any = True
    return comm, moved_any


def louvain(graph: ItemGraph, seed: int | np.random.Generator = 0, resolution: float = 1.0) -> CommunityMap:
    """Greedy two-phase modularity maximisation (local moves + aggregation)."""
    if not graph.nodes:
        raise ValueError("louvain needs a non-empty graph")
    rng = np.random.default_rng(seed)
    m = graph.total_weight
    membership = {n: n for n in graph.nodes}
    if m > 0:
        adj = graph.adjacency()
        while True:
            nodes = sorted(adj)
            order = [nodes[i] for i in rng.permutation(len(nodes))]
            k = {n: sum(adj[n].values()) for n in nodes}
            comm, moved = _local_moves(adj, k, order, resolution, 2 * m)
            if not moved:
                break
            membership = {orig: comm[top] for orig, top in membership.items()}
            agg: dict = defaultdict(lambda: defaultdict(float))
            for a in nodes:
                for b, w in adj[a].items():
                    agg[comm[a]][comm[b]] += w
            adj = {c: dict(agg[c]) for c in set(comm.values())}
    # contiguous ids ordered by the smallest member node
    first: dict = {}
    for n in sorted(graph.nodes):
        first.setdefault(membership[n], len(first))
    assignment = {n: first[membership[n]] for n in graph.nodes}
    score = modularity(graph, assignment, resolution) if m > 0 else 0.0
    return CommunityMap(assignment, len(first), score)


@dataclass
class SweepRow:
    threshold: int
    n_items: int
    modularity: float
    median_community_size: float
    n_communities: int
    empty: bool = False


def community_sweep(
    pairs: Iterable,
    thresholds: Sequence[int],
    seed: int = 0,
    strategy: str = "sum",
    weighted_degree: bool = True,
) -> tuple[list[SweepRow], dict[int, CommunityMap]]:
    """Filter -> project -> Louvain at each degree threshold."""
    if list(thresholds) != sorted(thresholds):
        raise ValueError("thresholds must be sorted ascending")
    base = build_bipartite(pairs)
    rows, maps = [], {}
    for t in thresholds:
        filtered = degree_filter(base, t, weighted_degree)
        if not filtered.items:
            rows.append(SweepRow(t, 0, float("nan"), float("nan"), 0, empty=True))
            continue
        proj = project_items(filtered, strategy)
        cmap = louvain(proj, seed)
        maps[t] = cmap
        rows.append(
            SweepRow(
                t,
                len(filtered.items),
                cmap.modularity_score,
                float(statistics.median(cmap.sizes())),
                cmap.n_communities,
            )
        )
    return rows, maps


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["min_item_degree", "n_items", "modularity", "median_items_per_community", "n_communities", "empty"])
    for r in rows:
        w.writerow([r.threshold, r.n_items, f"{r.modularity:.6f}", r.median_community_size, r.n_communities, int(r.empty)])
    return buf.getvalue()


def save_community_map(
    directory: str | Path, mapping: Mapping[int, int], cmap: CommunityMap, threshold: int
) -> None:
    """``community_map.csv`` over catalog indices plus a JSON sidecar."""
    directory = Path(directory)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["item_index", "community_id"])
    for item in sorted(mapping):
        w.writerow([item, mapping[item]])
    (directory / "community_map.csv").write_text(buf.getvalue(), encoding="utf-8")
    sidecar = {
        "modularity": cmap.modularity_score,
        "n_communities": cmap.n_communities,
        "threshold": threshold,
    }
    (directory / "community_map.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_community_map(directory: str | Path) -> dict[int, int]:
    with open(Path(directory) / "community_map.csv", newline="") as fh:
        return {int(r["item_index"]): int(r["community_id"]) for r in csv.DictReader(fh)}
