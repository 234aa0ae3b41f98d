"""Cross-domain interaction data model, ingestion, and inductive splits.

Entity ids are dense and contiguous per domain and class, with seen
entities occupying the index prefix so "is seen" is a single comparison.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

Edge = tuple[int, int]


class EmptyDomainError(ValueError):
    """Filtering removed every interaction from the domain."""


class DataFormatError(ValueError):
    """Malformed record or manifest line; carries file/line context."""


@dataclass(frozen=True)
class Interaction:
    user: int
    item: int
    rating: float
    timestamp: int | None = None


@dataclass(frozen=True)
class DomainGraph:
    tag: str
    n_users: int
    n_seen_users: int
    n_items: int
    n_seen_items: int
    user_items: tuple[tuple[int, ...], ...]
    item_users: tuple[tuple[int, ...], ...]
    template_users: tuple[int, ...] = ()
    template_items: tuple[int, ...] = ()

    def is_seen_user(self, u: int) -> bool:
        return u < self.n_seen_users

    def is_seen_item(self, i: int) -> bool:
        return i < self.n_seen_items

    def edges(self) -> list[Edge]:
        return [(u, i) for u, items in enumerate(self.user_items) for i in items]

    @property
    def n_edges(self) -> int:
        return sum(len(items) for items in self.user_items)


@dataclass(frozen=True)
class SplitBundle:
    train: tuple[Edge, ...]
    val: tuple[Edge, ...]
    new: tuple[Edge, ...]
    test: tuple[Edge, ...]


@dataclass(frozen=True)
class OverlapMap:
    """(user id in domain A, user id in domain B) pairs for shared persons."""
    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        a_ids = [a for a, _ in self.pairs]
        b_ids = [b for _, b in self.pairs]
        if len(set(a_ids)) != len(a_ids) or len(set(b_ids)) != len(b_ids):
            raise ValueError("overlap map must be bijective over its members")


def build_adjacency(n_users: int, n_items: int, edges: Iterable[Edge]):
    user_items = [[] for _ in range(n_users)]
    item_users = [[] for _ in range(n_items)]
    for u, i in edges:
        user_items[u].append(i)
        item_users[i].append(u)
    return (tuple(tuple(sorted(s)) for s in user_items),
            tuple(tuple(sorted(s)) for s in item_users))


def graph_from_edges(tag: str, n_users: int, n_items: int,
                     edges: Iterable[Edge],
                     n_seen_users: int | None = None,
                     n_seen_items: int | None = None) -> DomainGraph:
    ui, iu = build_adjacency(n_users, n_items, edges)
    return DomainGraph(
        tag=tag, n_users=n_users, n_items=n_items,
        n_seen_users=n_users if n_seen_users is None else n_seen_users,
        n_seen_items=n_items if n_seen_items is None else n_seen_items,
        user_items=ui, item_users=iu)


def graph_with_edges(graph: DomainGraph, edges: Iterable[Edge]) -> DomainGraph:
    """Same entities and templates, adjacency rebuilt over `edges`."""
    ui, iu = build_adjacency(graph.n_users, graph.n_items, edges)
    return replace(graph, user_items=ui, item_users=iu)


def with_templates(graph: DomainGraph, template_users: Sequence[int],
                   template_items: Sequence[int]) -> DomainGraph:
    tu, ti = tuple(sorted(template_users)), tuple(sorted(template_items))
    if any(u >= graph.n_seen_users for u in tu) or any(i >= graph.n_seen_items for i in ti):
        raise ValueError("templates must be seen entities")
    return replace(graph, template_users=tu, template_items=ti)


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

def read_interaction_file(path) -> list[tuple[str, str, float, int | None]]:
    """Parse `user<TAB>item<TAB>rating[<TAB>timestamp]` lines."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) not in (3, 4):
                raise DataFormatError(
                    f"{path}:{lineno}: expected 3 or 4 tab-separated fields, got {len(parts)}")
            try:
                rating = float(parts[2])
                ts = int(parts[3]) if len(parts) == 4 else None
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            records.append((parts[0], parts[1], rating, ts))
    return records


def ingest(records: Iterable[tuple[str, str, float, int | None]],
           min_rating: float = 4.0,
           min_degree: int = 10,
           tag: str = "A") -> tuple[DomainGraph, dict[str, int], dict[str, int]]:
    """Filter raw review records and build a dense-id graph.

    Keeps interactions with rating >= min_rating, drops duplicate
    (user, item) pairs (first occurrence wins), then iteratively removes
    entities with degree <= min_degree until a fixpoint: each removal can
    push other entities below the threshold.  Ids are assigned by first
    appearance in the surviving stream.
    """
    if min_degree < 0:
        raise ValueError("min_degree must be >= 0")
    kept: list[tuple[str, str]] = []
    seen_pairs: set[tuple[str, str]] = set()
    for user_key, item_key, rating, _ts in records:
        if rating < min_rating:
            continue
        pair = (user_key, item_key)
        if pair in seen_pairs:
            continue
        seen_pairs.add(pair)
        kept.append(pair)
    if not kept:
        raise EmptyDomainError(f"domain {tag}: no interactions pass the rating filter")

    while True:
        u_deg: dict[str, int] = {}
        i_deg: dict[str, int] = {}
        for u, i in kept:
            u_deg[u] = u_deg.get(u, 0) + 1
            i_deg[i] = i_deg.get(i, 0) + 1
        survivors = [(u, i) for u, i in kept
                     if u_deg[u] > min_degree and i_deg[i] > min_degree]
        if len(survivors) == len(kept):
            break
        kept = survivors
        if not kept:
            raise EmptyDomainError(
                f"domain {tag}: degree filter (>{min_degree}) removed everything")

    user_map: dict[str, int] = {}
    item_map: dict[str, int] = {}
    edges: list[Edge] = []
    for u, i in kept:
        if u not in user_map:
            user_map[u] = len(user_map)
        if i not in item_map:
            item_map[i] = len(item_map)
        edges.append((user_map[u], item_map[i]))
    graph = graph_from_edges(tag, len(user_map), len(item_map), edges)
    return graph, user_map, item_map


# ---------------------------------------------------------------------------
# inductive split
# ---------------------------------------------------------------------------

def make_inductive_split(graph: DomainGraph,
                         unseen_frac: float = 0.2,
                         seen_split: tuple[float, float, float] = (0.7, 0.15, 0.15),
                         new_frac_of_unseen: float = 0.5,
                         seed: int = 0):
    """Sample unseen entities, relabel seen-first, and partition interactions.

    Returns (relabeled graph, SplitBundle, user_perm, item_perm) where the
    permutations map old id -> new id.  Every filtered interaction lands in
    exactly one of train/val/test/new.  Seen users with fewer than 3
    seen-seen interactions keep all of them in train.
    """
    if not 0.0 <= unseen_frac < 1.0:
        raise ValueError("unseen_frac must lie in [0, 1)")
    if abs(sum(seen_split) - 1.0) > 1e-9:
        raise ValueError("seen_split fractions must sum to 1")
    train_frac, val_frac, test_frac = seen_split
    rng = np.random.default_rng(seed)

    n_uu = math.floor(unseen_frac * graph.n_users)
    n_ui = math.floor(unseen_frac * graph.n_items)
    unseen_users = set(rng.choice(graph.n_users, size=n_uu, replace=False).tolist()) if n_uu else set()
    unseen_items = set(rng.choice(graph.n_items, size=n_ui, replace=False).tolist()) if n_ui else set()

    user_perm = _seen_first_permutation(graph.n_users, unseen_users)
    item_perm = _seen_first_permutation(graph.n_items, unseen_items)
    n_seen_users = graph.n_users - len(unseen_users)
    n_seen_items = graph.n_items - len(unseen_items)

    edges = [(user_perm[u], item_perm[i]) for u, i in graph.edges()]
    seen_by_user: dict[int, list[int]] = {}
    touching_by_user: dict[int, list[int]] = {}
    for u, i in edges:
        if u < n_seen_users and i < n_seen_items:
            seen_by_user.setdefault(u, []).append(i)
        else:
            touching_by_user.setdefault(u, []).append(i)

    train: list[Edge] = []
    val: list[Edge] = []
    test: list[Edge] = []
    new: list[Edge] = []

    for u in sorted(seen_by_user):
        items = np.array(sorted(seen_by_user[u]), dtype=np.int64)
        rng.shuffle(items)
        n = len(items)
        if n < 3:
            train.extend((u, int(i)) for i in items)
            continue
        n_val = max(1, math.floor(val_frac * n)) if val_frac > 0 else 0
        n_test = max(1, math.floor(test_frac * n)) if test_frac > 0 else 0
        # keep at least one training edge per user
        while n - n_val - n_test < 1:
            if n_test >= n_val and n_test > 0:
                n_test -= 1
            else:
                n_val -= 1
        val.extend((u, int(i)) for i in items[:n_val])
        test.extend((u, int(i)) for i in items[n_val:n_val + n_test])
        train.extend((u, int(i)) for i in items[n_val + n_test:])

    for u in sorted(touching_by_user):
        items = np.array(sorted(touching_by_user[u]), dtype=np.int64)
        rng.shuffle(items)
        n_new = math.floor(new_frac_of_unseen * len(items))
        new.extend((u, int(i)) for i in items[:n_new])
        test.extend((u, int(i)) for i in items[n_new:])

    ui, iu = build_adjacency(graph.n_users, graph.n_items, edges)
    relabeled = DomainGraph(
        tag=graph.tag, n_users=graph.n_users, n_seen_users=n_seen_users,
        n_items=graph.n_items, n_seen_items=n_seen_items,
        user_items=ui, item_users=iu)
    bundle = SplitBundle(train=tuple(sorted(train)), val=tuple(sorted(val)),
                         new=tuple(sorted(new)), test=tuple(sorted(test)))
    return relabeled, bundle, user_perm, item_perm


def _seen_first_permutation(n: int, unseen: set[int]) -> np.ndarray:
    perm = np.empty(n, dtype=np.int64)
    nxt = 0
    for old in range(n):
        if old not in unseen:
            perm[old] = nxt
            nxt += 1
    for old in sorted(unseen):
        perm[old] = nxt
        nxt += 1
    return perm


def validate_split(graph: DomainGraph, bundle: SplitBundle) -> None:
    """Raise if any SplitBundle invariant is violated."""
    parts = [set(bundle.train), set(bundle.val), set(bundle.new), set(bundle.test)]
    names = ["train", "val", "new", "test"]
    for a in range(len(parts)):
        for b in range(a + 1, len(parts)):
            if parts[a] & parts[b]:
                raise ValueError(f"{names[a]} and {names[b]} overlap")
    union = parts[0] | parts[1] | parts[2] | parts[3]
    if union != set(graph.edges()):
        raise ValueError("split does not cover the interaction set exactly once")
    for u, i in bundle.train + bundle.val:
        if not (graph.is_seen_user(u) and graph.is_seen_item(i)):
            raise ValueError("train/val edge touches an unseen entity")
    for u, i in bundle.new:
        if graph.is_seen_user(u) and graph.is_seen_item(i):
            raise ValueError("new edge does not touch an unseen entity")


# ---------------------------------------------------------------------------
# template selection
# ---------------------------------------------------------------------------

def select_templates(graph: DomainGraph, policy: str = "all-seen",
                     m: int | None = None) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Template user/item sets: every seen entity, or the m highest-degree
    seen entities with ties broken by ascending id."""
    if policy == "all-seen":
        return (tuple(range(graph.n_seen_users)), tuple(range(graph.n_seen_items)))
    if policy == "top-degree":
        if m is None or m < 0:
            raise ValueError("top-degree policy needs m >= 0")
        if m > graph.n_seen_users or m > graph.n_seen_items:
            raise ValueError("m exceeds the seen entity count")
        users = sorted(range(graph.n_seen_users),
                       key=lambda u: (-len(graph.user_items[u]), u))[:m]
        items = sorted(range(graph.n_seen_items),
                       key=lambda i: (-len(graph.item_users[i]), i))[:m]
        return tuple(sorted(users)), tuple(sorted(items))
    raise ValueError(f"unknown template policy: {policy}")


# ---------------------------------------------------------------------------
# split manifest io
# ---------------------------------------------------------------------------

_TAGS = ("train", "val", "new", "test")


def write_split_manifest(path, graph: DomainGraph, bundle: SplitBundle,
                         seed: int) -> None:
    header = {
        "domain": graph.tag,
        "seed": seed,
        "n_users": graph.n_users,
        "n_seen_users": graph.n_seen_users,
        "n_items": graph.n_items,
        "n_seen_items": graph.n_seen_items,
        "counts": {t: len(getattr(bundle, t)) for t in _TAGS},
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for tag in _TAGS:
            for u, i in getattr(bundle, tag):
                fh.write(f"{u}\t{i}\t{tag}\n")


def read_split_manifest(path, tag: str | None = None) -> tuple[DomainGraph, SplitBundle, int]:
    with open(path, encoding="utf-8") as fh:
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}:1: bad manifest header: {exc}") from None
        buckets: dict[str, list[Edge]] = {t: [] for t in _TAGS}
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[2] not in _TAGS:
                raise DataFormatError(f"{path}:{lineno}: bad split line")
            buckets[parts[2]].append((int(parts[0]), int(parts[1])))
    bundle = SplitBundle(**{t: tuple(buckets[t]) for t in _TAGS})
    edges = [e for t in _TAGS for e in buckets[t]]
    graph = graph_from_edges(
        tag or header["domain"], header["n_users"], header["n_items"], edges,
        n_seen_users=header["n_seen_users"], n_seen_items=header["n_seen_items"])
    return graph, bundle, header["seed"]
