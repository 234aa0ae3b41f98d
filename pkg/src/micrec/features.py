"""Per-item multimodal features, derived user features, and the exact
top-K fused-similarity neighbor index.

Feature files are line-oriented: `MICREC-FEAT v1 <modality> <count> <dim>`
followed by one `<id> <f1> ... <fdim>` row per entity, UTF-8 with LF
endings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray

FEATURE_MAGIC = "MICREC-FEAT"
FEATURE_VERSION = "v1"
MODALITIES = ("text", "visual")


class FeatureError(ValueError):
    pass


class FeatureFormatError(FeatureError):
    """Header or row does not parse under the declared layout."""


class IncompleteFeaturesError(FeatureError):
    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__(f"incomplete-features: missing ids {self.missing}")


class InvalidFeatureError(FeatureError):
    """Non-finite entry in a feature row."""


@dataclass(frozen=True)
class UserFeatures:
    text: Array
    visual: Array


@dataclass(frozen=True)
class NeighborIndex:
    k: int
    user_neighbors: tuple[tuple[int, ...], ...]
    user_scores: tuple[tuple[float, ...], ...]
    item_neighbors: tuple[tuple[int, ...], ...]
    item_scores: tuple[tuple[float, ...], ...]


# ---------------------------------------------------------------------------
# file io
# ---------------------------------------------------------------------------

def load_features(path, expected_count: int) -> tuple[str, Array]:
    """Load one modality's matrix, validating ids 0..expected_count-1."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(" ")
        if len(header) != 5 or header[0] != FEATURE_MAGIC or header[1] != FEATURE_VERSION:
            raise FeatureFormatError(f"{path}: bad feature header")
        modality = header[2]
        if modality not in MODALITIES:
            raise FeatureFormatError(f"{path}: unknown modality {modality!r}")
        try:
            count, dim = int(header[3]), int(header[4])
        except ValueError:
            raise FeatureFormatError(f"{path}: non-integer count/dim") from None
        mat = np.zeros((expected_count, dim), dtype=np.float64)
        present = np.zeros(expected_count, dtype=bool)
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(" ")
            if len(parts) != dim + 1:
                raise FeatureFormatError(
                    f"{path}:{lineno}: expected id + {dim} floats, got {len(parts) - 1}")
            idx = int(parts[0])
            if idx < 0 or idx >= expected_count:
                raise FeatureFormatError(f"{path}:{lineno}: id {idx} out of range")
            if present[idx]:
                raise FeatureFormatError(f"{path}:{lineno}: duplicate id {idx}")
            row = np.array([float(x) for x in parts[1:]], dtype=np.float64)
            if not np.all(np.isfinite(row)):
                raise InvalidFeatureError(f"{path}:{lineno}: non-finite value for id {idx}")
            mat[idx] = row
            present[idx] = True
    if count != expected_count or not present.all():
        raise IncompleteFeaturesError(np.nonzero(~present)[0].tolist())
    return modality, mat


def save_features(path, modality: str, matrix: Array) -> None:
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality {modality!r}")
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{FEATURE_MAGIC} {FEATURE_VERSION} {modality} "
                 f"{matrix.shape[0]} {matrix.shape[1]}\n")
        for idx, row in enumerate(matrix):
            fh.write(str(idx) + " " + " ".join(repr(float(v)) for v in row) + "\n")


# ---------------------------------------------------------------------------
# user features and similarities
# ---------------------------------------------------------------------------

def derive_user_features(user_items, item_text: Array, item_vis: Array) -> UserFeatures:
    """Mean of interacted items' features; empty adjacency gives a zero row.

    Accumulation runs in ascending item-id order in float64 so results are
    reproducible bitwise.
    """
    n_users = len(user_items)
    text = np.zeros((n_users, item_text.shape[1]), dtype=np.float64)
    vis = np.zeros((n_users, item_vis.shape[1]), dtype=np.float64)
    for u, items in enumerate(user_items):
        if not len(items):
            continue
        idx = np.asarray(sorted(items), dtype=np.int64)
        text[u] = item_text[idx].sum(axis=0) / len(idx)
        vis[u] = item_vis[idx].sum(axis=0) / len(idx)
    return UserFeatures(text=text, visual=vis)


def cosine(a: Array, b: Array) -> float:
    """Cosine similarity with the zero-vector convention cos(0, .) = 0."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def fused_similarity(a_text: Array, a_vis: Array, b_text: Array, b_vis: Array,
                     w: float) -> float:
    """w * cos(text) + (1 - w) * cos(visual)."""
    if not 0.0 < w < 1.0:
        raise ValueError("fusion weight must lie in (0, 1)")
    return w * cosine(a_text, b_text) + (1.0 - w) * cosine(a_vis, b_vis)


def _unit_rows(mat: Array) -> Array:
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    return mat / safe


def fused_similarity_matrix(text: Array, vis: Array, w_text: float,
                            w_vis: float, block: int = 512) -> Array:
    """All-pairs fused similarity within one population, exact, blocked."""
    ut, uv = _unit_rows(text), _unit_rows(vis)
    n = text.shape[0]
    out = np.empty((n, n), dtype=np.float64)
    for start in range(0, n, block):
        stop = min(start + block, n)
        out[start:stop] = w_text * (ut[start:stop] @ ut.T) + w_vis * (uv[start:stop] @ uv.T)
    return out


def _top_k(sim: Array, k: int) -> tuple[list[tuple[int, ...]], list[tuple[float, ...]]]:
    n = sim.shape[0]
    take = min(k, n - 1)
    neighbors, scores = [], []
    ids = np.arange(n)
    for row in range(n):
        s = sim[row].copy()
        s[row] = -np.inf
        order = np.lexsort((ids, -s))[:take]
        neighbors.append(tuple(int(j) for j in order))
        scores.append(tuple(float(s[j]) for j in order))
    return neighbors, scores


def modality_weights(w: float, modality: str = "fused") -> tuple[float, float]:
    """Weights for (text, visual): full fusion or a single-modality ablation."""
    if modality == "fused":
        if not 0.0 < w < 1.0:
            raise ValueError("fusion weight must lie in (0, 1)")
        return w, 1.0 - w
    if modality == "text":
        return 1.0, 0.0
    if modality == "visual":
        return 0.0, 1.0
    raise ValueError(f"unknown modality selection {modality!r}")


def build_neighbor_index(users: UserFeatures, item_text: Array, item_vis: Array,
                         w: float, k: int, modality: str = "fused") -> NeighborIndex:
    """Exact top-K most similar users per user and items per item.

    Lists are ordered by descending fused similarity with ties broken by
    ascending id; the entity itself is excluded.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    w_text, w_vis = modality_weights(w, modality)
    un, us = _top_k(fused_similarity_matrix(users.text, users.visual, w_text, w_vis), k)
    inn, isc = _top_k(fused_similarity_matrix(item_text, item_vis, w_text, w_vis), k)
    return NeighborIndex(k=k,
                         user_neighbors=tuple(un), user_scores=tuple(us),
                         item_neighbors=tuple(inn), item_scores=tuple(isc))
