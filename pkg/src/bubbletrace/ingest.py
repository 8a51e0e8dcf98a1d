"""Interaction-log parsing, filtering, sampling, temporal splits and windowing."""

from __future__ import annotations

import csv
import io
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

from ._container import read_container, write_container
from .model import pad_histories

SPLITS = ("train", "validation", "test")
DATASET_MAGIC = b"BTDATA\x00\x01"
DATASET_VERSION = 1


class IngestError(ValueError):
    pass


@dataclass(frozen=True)
class InteractionRecord:
    user_id: str
    item_id: str
    stream_session_id: str
    time_start: int
    time_stop: int

    def __post_init__(self) -> None:
        if not (self.user_id and self.item_id and self.stream_session_id):
            raise IngestError("user, item and session ids must be non-empty")
        if self.time_stop < self.time_start:
            raise IngestError(f"time_stop {self.time_stop} < time_start {self.time_start}")


@dataclass(frozen=True)
class SequenceExample:
    user: int
    history: tuple[int, ...]
    target: int
    split: str

    @property
    def history_len(self) -> int:
        return len(self.history)


class ItemCatalog:
    """Bijection between item ids and indices 1..V; index 0 is padding."""

    def __init__(self, item_ids: Iterable[str]):
        self.item_ids: list[str] = sorted(set(item_ids))
        self._index = {item: i + 1 for i, item in enumerate(self.item_ids)}

    def __len__(self) -> int:
        return len(self.item_ids)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._index

    def index(self, item_id: str) -> int:
        return self._index[item_id]

    def item(self, index: int) -> str:
        if index < 1:
            raise KeyError("index 0 is the padding token")
        return self.item_ids[index - 1]


def parse_interactions(source: TextIO | str | Path, has_header: bool = False) -> list[InteractionRecord]:
    """Read ``user_id, stream_session_id, streamer, time_start, time_stop`` rows."""
    if isinstance(source, (str, Path)):
        with open(source, newline="", encoding="utf-8") as fh:
            return parse_interactions(fh, has_header)
    records = []
    for lineno, row in enumerate(csv.reader(source), start=1):
        if has_header and lineno == 1:
            continue
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != 5:
            raise IngestError(f"line {lineno}: expected 5 columns, got {len(row)}")
        user, session, item, start, stop = (cell.strip() for cell in row)
        try:
            t0, t1 = int(start), int(stop)
        except ValueError:
            raise IngestError(f"line {lineno}: time columns must be integers") from None
        try:
            records.append(InteractionRecord(user, item, session, t0, t1))
        except IngestError as exc:
            raise IngestError(f"line {lineno}: {exc}") from None
    return records


def write_interactions(records: Sequence[InteractionRecord], path: str | Path, header: bool = True) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if header:
        writer.writerow(["user_id", "stream_session_id", "streamer", "time_start", "time_stop"])
    for r in records:
        writer.writerow([r.user_id, r.stream_session_id, r.item_id, r.time_start, r.time_stop])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def filter_items(records: Sequence[InteractionRecord], min_item_interactions: int) -> list[InteractionRecord]:
    counts = Counter(r.item_id for r in records)
    return [r for r in records if counts[r.item_id] >= min_item_interactions]


def filter_dataset(
    records: Sequence[InteractionRecord],
    min_item_interactions: int = 100,
    min_user_interactions: int = 10,
) -> list[InteractionRecord]:
    """Item pass, then user pass on what remains. No iteration to a fixpoint."""
    kept = filter_items(records, min_item_interactions)
    user_counts = Counter(r.user_id for r in kept)
    return [r for r in kept if user_counts[r.user_id] >= min_user_interactions]


def sample_users(
    records: Sequence[InteractionRecord], n_users: int, seed: int | np.random.Generator
) -> list[InteractionRecord]:
    users = sorted({r.user_id for r in records})
    if n_users > len(users):
        raise IngestError(f"cannot sample {n_users} users from a population of {len(users)}")
    if n_users < 0:
        raise IngestError("n_users must be non-negative")
    rng = np.random.default_rng(seed)
    chosen = {users[i] for i in rng.choice(len(users), size=n_users, replace=False)}
    return [r for r in records if r.user_id in chosen]


def _user_order(records: Sequence[InteractionRecord]) -> dict[str, list[int]]:
    """Per-user record positions in chronological order (stable on ties)."""
    by_user: dict[str, list[int]] = defaultdict(list)
    for pos, r in enumerate(records):
        by_user[r.user_id].append(pos)
    for positions in by_user.values():
        positions.sort(key=lambda p: records[p].time_start)
    return by_user


def split_sizes(n: int) -> tuple[int, int, int]:
    n_train = (8 * n) // 10
    n_val = n // 10
    return n_train, n_val, n - n_train - n_val


def split_temporal(records: Sequence[InteractionRecord]) -> list[str]:
    """Split label for each record: per user, first 80% train, next 10% validation, rest test."""
    labels = [""] * len(records)
    for positions in _user_order(records).values():
        n_train, n_val, _ = split_sizes(len(positions))
        for rank, pos in enumerate(positions):
            if rank < n_train:
                labels[pos] = "train"
            elif rank < n_train + n_val:
                labels[pos] = "validation"
            else:
                labels[pos] = "test"
    return labels


def windowize(
    records: Sequence[InteractionRecord],
    catalog: ItemCatalog,
    labels: Sequence[str],
    lookback: int = 50,
) -> list[SequenceExample]:
    """One example per record after each user's first, carrying the target's split.

    Histories look back across split boundaries, never forward.
    """
    users = sorted({r.user_id for r in records})
    user_index = {u: i for i, u in enumerate(users)}
    order = _user_order(records)
    examples = []
    for user in users:
        positions = order[user]
        seq = [catalog.index(records[p].item_id) for p in positions]
        for k in range(1, len(seq)):
            examples.append(
                SequenceExample(
                    user=user_index[user],
                    history=tuple(seq[max(0, k - lookback) : k]),
                    target=seq[k],
                    split=labels[positions[k]],
                )
            )
    return examples


def generate_synthetic(
    n_users: int,
    n_items: int,
    n_communities: int,
    bubble_strength: float,
    records_per_user: int,
    seed: int | np.random.Generator,
) -> list[InteractionRecord]:
    """Planted-bubble interactions.

    Items are split into ``n_communities`` contiguous equal blocks. Each user
    gets a uniform home community; each interaction comes from the home block
    with probability ``bubble_strength`` and uniformly from all items otherwise.
    """
    if not 0.0 <= bubble_strength <= 1.0:
        raise IngestError(f"bubble_strength must lie in [0, 1], got {bubble_strength}")
    if n_communities <= 0 or n_items % n_communities:
        raise IngestError("n_items must be divisible by n_communities")
    rng = np.random.default_rng(seed)
    block = n_items // n_communities
    width = len(str(n_items - 1))
    homes = rng.integers(0, n_communities, size=n_users)
    records = []
    for u in range(n_users):
        in_home = rng.random(records_per_user) < bubble_strength
        local = rng.integers(0, block, size=records_per_user)
        anywhere = rng.integers(0, n_items, size=records_per_user)
        picks = np.where(in_home, homes[u] * block + local, anywhere)
        for k, item in enumerate(picks):
            records.append(
                InteractionRecord(
                    user_id=f"u{u}",
                    item_id=f"i{int(item):0{width}d}",
                    stream_session_id=f"s{u}_{k}",
                    time_start=2 * k,
                    time_stop=2 * k + 1,
                )
            )
    return records


def synthetic_truth(n_items: int, n_communities: int) -> dict[str, int]:
    """Planted community of every synthetic item id."""
    block = n_items // n_communities
    width = len(str(n_items - 1))
    return {f"i{j:0{width}d}": j // block for j in range(n_items)}


def dataset_statistics(records: Sequence[InteractionRecord]) -> dict[str, float]:
    """Users, items, mean interactions and mean unique items per user."""
    per_user: dict[str, list[str]] = defaultdict(list)
    for r in records:
        per_user[r.user_id].append(r.item_id)
    n_users = len(per_user)
    return {
        "n_users": n_users,
        "n_items": len({r.item_id for r in records}),
        "mean_interactions_per_user": len(records) / n_users if n_users else 0.0,
        "mean_unique_per_user": (
            sum(len(set(v)) for v in per_user.values()) / n_users if n_users else 0.0
        ),
    }


@dataclass
class Dataset:
    """Indexed, split-labelled examples plus the raw interactions they came from."""

    catalog: ItemCatalog
    examples: list[SequenceExample]
    lookback: int
    raw_users: list[str]
    raw_items: list[str]
    raw_pairs: np.ndarray  # (n, 2) codes into raw_users / raw_items

    def split(self, name: str) -> list[SequenceExample]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [ex for ex in self.examples if ex.split == name]

    @property
    def n_items(self) -> int:
        return len(self.catalog)


def build_dataset(
    raw_records: Sequence[InteractionRecord], kept_records: Sequence[InteractionRecord], lookback: int = 50
) -> Dataset:
    catalog = ItemCatalog(r.item_id for r in kept_records)
    labels = split_temporal(kept_records)
    examples = windowize(kept_records, catalog, labels, lookback)
    raw_users = sorted({r.user_id for r in raw_records})
    raw_items = sorted({r.item_id for r in raw_records})
    u_code = {u: i for i, u in enumerate(raw_users)}
    i_code = {it: i for i, it in enumerate(raw_items)}
    pairs = np.array([(u_code[r.user_id], i_code[r.item_id]) for r in raw_records], dtype=np.int64)
    return Dataset(catalog, examples, lookback, raw_users, raw_items, pairs.reshape(-1, 2))


def examples_to_arrays(examples: Sequence[SequenceExample], lookback: int) -> tuple[np.ndarray, np.ndarray]:
    """Left-padded history matrix and target vector."""
    X = pad_histories([ex.history for ex in examples], lookback)
    y = np.array([ex.target for ex in examples], dtype=np.int64)
    return X, y


def save_dataset(path: str | Path, ds: Dataset) -> None:
    lengths = np.array([ex.history_len for ex in ds.examples], dtype=np.int64)
    flat = np.array([i for ex in ds.examples for i in ex.history], dtype=np.int64)
    meta = {
        "lookback": ds.lookback,
        "catalog": ds.catalog.item_ids,
        "raw_users": ds.raw_users,
        "raw_items": ds.raw_items,
    }
    tensors = [
        ("user", np.array([ex.user for ex in ds.examples], dtype=np.int64)),
        ("target", np.array([ex.target for ex in ds.examples], dtype=np.int64)),
        ("split", np.array([SPLITS.index(ex.split) for ex in ds.examples], dtype=np.int64)),
        ("history_len", lengths),
        ("history", flat),
        ("raw_pairs", ds.raw_pairs),
    ]
    write_container(path, DATASET_MAGIC, DATASET_VERSION, meta, tensors)


def load_dataset(path: str | Path) -> Dataset:
    meta, t = read_container(path, DATASET_MAGIC, DATASET_VERSION)
    offsets = np.concatenate([[0], np.cumsum(t["history_len"])])
    hist = t["history"].tolist()
    examples = [
        SequenceExample(
            user=int(t["user"][k]),
            history=tuple(hist[offsets[k] : offsets[k + 1]]),
            target=int(t["target"][k]),
            split=SPLITS[int(t["split"][k])],
        )
        for k in range(len(t["target"]))
    ]
    return Dataset(
        ItemCatalog(meta["catalog"]),
        examples,
        int(meta["lookback"]),
        list(meta["raw_users"]),
        list(meta["raw_items"]),
        t["raw_pairs"].reshape(-1, 2),
    )
