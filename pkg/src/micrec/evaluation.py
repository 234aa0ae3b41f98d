"""Top-N ranking metrics under the inductive protocol.

Candidates per user are all items minus the interactions the model has
observed (train + new, and val as well during test evaluation); users
with an empty relevant set are skipped.  Reported values are macro
averages over evaluated users, multiplied by 100.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .graph import SplitBundle

Array = np.ndarray


class NoEvaluableUsersError(ValueError):
    pass


@dataclass(frozen=True)
class MetricRow:
    domain: str
    n: int
    slice_tag: str
    precision: float
    recall: float
    ndcg: float
    users: int


@dataclass(frozen=True)
class EvalReport:
    rows: tuple[MetricRow, ...]


def rank_items(r: Array, n_users: int, user: int, candidates: Array) -> Array:
    """Candidates ordered by descending dot-product score, ties by
    ascending item id."""
    candidates = np.asarray(candidates, dtype=np.int64)
    scores = r[n_users + candidates] @ r[user]
    order = np.lexsort((candidates, -scores))
    return candidates[order]


def metrics_at(ranked, relevant, n: int) -> tuple[float, float, float]:
    """(precision, recall, ndcg) at cutoff n; ranks are 1-based and the
    ideal DCG truncates at min(n, |relevant|)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    relevant = set(relevant)
    hits = 0
    dcg = 0.0
    for pos, item in enumerate(ranked[:n], start=1):
        if item in relevant:
            hits += 1
            dcg += 1.0 / math.log2(pos + 1)
    idcg = sum(1.0 / math.log2(p + 1) for p in range(1, min(n, len(relevant)) + 1))
    return hits / n, hits / len(relevant), dcg / idcg if idcg else 0.0


def ranking_contexts(split: SplitBundle, stage: str = "test"):
    """Per-user (excluded items, relevant items) for one evaluation stage."""
    exclude: dict[int, set[int]] = {}
    relevant: dict[int, set[int]] = {}
    if stage == "test":
        observed = list(split.train) + list(split.new) + list(split.val)
        target = split.test
    elif stage == "val":
        observed = list(split.train)
        target = split.val
    else:
        raise ValueError(f"unknown evaluation stage {stage!r}")
    for u, i in observed:
        exclude.setdefault(u, set()).add(i)
    for u, i in target:
        relevant.setdefault(u, set()).add(i)
    return exclude, relevant


def low_degree_items(train_edges, n_items: int, q: float) -> set[int]:
    """The bottom ceil(q * n_items) items by train-edge frequency, ties at
    the boundary broken by ascending id."""
    freq = np.zeros(n_items, dtype=np.int64)
    for _u, i in train_edges:
        freq[i] += 1
    take = math.ceil(q * n_items)
    order = np.lexsort((np.arange(n_items), freq))
    return set(int(i) for i in order[:take])


def evaluate(r: Array, n_users: int, n_items: int,
             exclude: dict[int, set[int]], relevant: dict[int, set[int]],
             n_list, domain: str = "A",
             slices: dict[str, set[int] | None] | None = None) -> EvalReport:
    """Macro-averaged Precision/Recall/NDCG x100 per N and slice.

    `slices` maps a slice tag to an item subset restricting the relevant
    sets (None means no restriction).  Users whose (restricted) relevant
    set is empty are skipped; if nothing is evaluable the run errors.
    """
    slices = slices or {"all": None}
    n_list = list(n_list)
    all_items = np.arange(n_items, dtype=np.int64)
    rows: list[MetricRow] = []
    per_slice: dict[str, dict[int, list[tuple[float, float, float]]]] = {
        tag: {n: [] for n in n_list} for tag in slices}

    for user in sorted(relevant):
        rel_full = relevant[user]
        if not rel_full:
            continue
        banned = exclude.get(user, set())
        candidates = (all_items[~np.isin(all_items, sorted(banned))]
                      if banned else all_items)
        ranked = rank_items(r, n_users, user, candidates)
        for tag, allowed in slices.items():
            rel = rel_full if allowed is None else rel_full & allowed
            if not rel:
                continue
            for n in n_list:
                per_slice[tag][n].append(metrics_at(ranked, rel, n))

    for tag in slices:
        for n in n_list:
            vals = per_slice[tag][n]
            if not vals:
                raise NoEvaluableUsersError(
                    f"domain {domain}: no users evaluable for slice {tag!r}")
            arr = np.asarray(vals, dtype=np.float64)
            mean = arr.mean(axis=0) * 100.0
            rows.append(MetricRow(domain=domain, n=n, slice_tag=tag,
                                  precision=float(mean[0]), recall=float(mean[1]),
                                  ndcg=float(mean[2]), users=len(vals)))
    return EvalReport(rows=tuple(rows))


def report_lines(report: EvalReport) -> list[str]:
    """Machine-readable `domain N slice precision recall ndcg users` lines."""
    return [f"{r.domain} {r.n} {r.slice_tag} {r.precision:.6f} "
            f"{r.recall:.6f} {r.ndcg:.6f} {r.users}" for r in report.rows]


def format_report(report: EvalReport) -> str:
    """Aligned text table for human eyes."""
    head = ("domain", "N", "slice", "Pre", "Rec", "NDCG", "users")
    body = [(r.domain, str(r.n), r.slice_tag, f"{r.precision:.3f}",
             f"{r.recall:.3f}", f"{r.ndcg:.3f}", str(r.users))
            for r in report.rows]
    widths = [max(len(row[c]) for row in [head] + body) for c in range(len(head))]
    fmt = "  ".join("{:>%d}" % w for w in widths)
    return "\n".join(fmt.format(*row) for row in [head] + body)
