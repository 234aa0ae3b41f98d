"""Per-domain user/item representations.

Pipeline per domain: template-derived rows -> (dropout in train mode) ->
neighbor aggregation over the multimodal top-K index -> L rounds of
propagation on the symmetric-normalized interaction graph, with layer
outputs averaged.

Everything is expressed on the reverse-mode tape so training and the
plain numpy API share one code path; the numpy wrappers just unwrap
values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import numeric
from .features import NeighborIndex
from .graph import DomainGraph
from .numeric import Var

Array = np.ndarray

CKPT_MAGIC = "MICREC-CKPT"
CKPT_VERSION = "v1"


class CheckpointError(ValueError):
    """Version tag or population mismatch when loading a checkpoint."""


@dataclass
class EncoderConfig:
    d: int = 64
    alpha: float = 1.0
    k: int = 3
    layers: int = 3
    dropout_p: float = 0.2

    def __post_init__(self):
        if self.d < 1 or self.layers < 0:
            raise ValueError("d must be >= 1 and layers >= 0")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")


@dataclass
class DomainParams:
    """Learnable tensors of one domain's encoder."""
    e_user: Array   # |U_tem| x d
    e_item: Array   # |I_tem| x d
    b_user: Array   # d
    b_item: Array   # d
    w_se: Array     # d x d projection for the self-enhanced loss


@dataclass
class MlpParams:
    """2-layer feedforward d -> d with a rectifier in between."""
    w1: Array
    b1: Array
    w2: Array
    b2: Array


@dataclass
class ModelParams:
    a: DomainParams
    b: DomainParams | None
    proj_a: MlpParams
    proj_b: MlpParams


@dataclass
class Representations:
    """x: template-derived rows, x_agg: after neighbor aggregation,
    r: final rows after propagation.  Users first, then items."""
    x: Var
    x_agg: Var
    r: Var


def init_domain_params(rng: np.random.Generator, n_template_users: int,
                       n_template_items: int, d: int,
                       dtype=np.float64) -> DomainParams:
    return DomainParams(
        e_user=(rng.normal(0.0, 0.1, size=(n_template_users, d))).astype(dtype),
        e_item=(rng.normal(0.0, 0.1, size=(n_template_items, d))).astype(dtype),
        b_user=np.zeros(d, dtype=dtype),
        b_item=np.zeros(d, dtype=dtype),
        w_se=(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d))).astype(dtype),
    )


def init_mlp_params(rng: np.random.Generator, d: int, dtype=np.float64) -> MlpParams:
    s = 1.0 / np.sqrt(d)
    return MlpParams(
        w1=(rng.normal(0.0, s, size=(d, d))).astype(dtype),
        b1=np.zeros(d, dtype=dtype),
        w2=(rng.normal(0.0, s, size=(d, d))).astype(dtype),
        b2=np.zeros(d, dtype=dtype),
    )


def named_tensors(params: ModelParams) -> dict[str, Array]:
    """Stable name -> tensor mapping used by the optimizer, the regularizer,
    and the checkpoint writer."""
    out: dict[str, Array] = {}
    for tag, dp in (("A", params.a), ("B", params.b)):
        if dp is None:
            continue
        out[f"{tag}.e_user"] = dp.e_user
        out[f"{tag}.e_item"] = dp.e_item
        out[f"{tag}.b_user"] = dp.b_user
        out[f"{tag}.b_item"] = dp.b_item
        out[f"{tag}.w_se"] = dp.w_se
    for tag, mp in (("proj_a", params.proj_a), ("proj_b", params.proj_b)):
        out[f"{tag}.w1"] = mp.w1
        out[f"{tag}.b1"] = mp.b1
        out[f"{tag}.w2"] = mp.w2
        out[f"{tag}.b2"] = mp.b2
    return out


def params_from_named(tensors: dict[str, Array], two_domains: bool) -> ModelParams:
    # bias vectors are stored as 1 x d in checkpoints; flatten them back
    def vec(name):
        return np.asarray(tensors[name]).reshape(-1)

    def dp(tag):
        return DomainParams(
            e_user=tensors[f"{tag}.e_user"], e_item=tensors[f"{tag}.e_item"],
            b_user=vec(f"{tag}.b_user"), b_item=vec(f"{tag}.b_item"),
            w_se=tensors[f"{tag}.w_se"])

    def mp(tag):
        return MlpParams(w1=tensors[f"{tag}.w1"], b1=vec(f"{tag}.b1"),
                         w2=tensors[f"{tag}.w2"], b2=vec(f"{tag}.b2"))

    return ModelParams(a=dp("A"), b=dp("B") if two_domains else None,
                       proj_a=mp("proj_a"), proj_b=mp("proj_b"))


# ---------------------------------------------------------------------------
# template operators
# ---------------------------------------------------------------------------

def template_operators(graph: DomainGraph, alpha: float, dtype=np.float64):
    """Sparse operators realizing the template sums.

    Returns (P_user, s_user, P_item, s_item) with
      x_users = P_user @ e_item + s_user[:, None] * b_user
      x_items = P_item @ e_user + s_item[:, None] * b_item
    where P rows carry the (count+1)^-alpha coefficient and s carries
    coefficient * count for the shared bias.
    """
    t_item_pos = {i: p for p, i in enumerate(graph.template_items)}
    t_user_pos = {u: p for p, u in enumerate(graph.template_users)}

    def build(adjacency, positions, n_rows, n_cols):
        rows, cols = [], []
        counts = np.zeros(n_rows, dtype=np.int64)
        for r, neigh in enumerate(adjacency):
            hits = [positions[x] for x in neigh if x in positions]
            counts[r] = len(hits)
            rows.extend([r] * len(hits))
            cols.extend(hits)
        coef = (counts + 1.0) ** (-alpha)
        data = coef[np.asarray(rows, dtype=np.int64)] if rows else np.zeros(0)
        mat = sp.csr_matrix((data.astype(dtype), (rows, cols)), shape=(n_rows, n_cols))
        return mat, (coef * counts).astype(dtype)

    p_user, s_user = build(graph.user_items, t_item_pos,
                           graph.n_users, len(graph.template_items))
    p_item, s_item = build(graph.item_users, t_user_pos,
                           graph.n_items, len(graph.template_users))
    return p_user, s_user, p_item, s_item


def template_encode_var(graph: DomainGraph, e_user: Var, e_item: Var,
                        b_user: Var, b_item: Var, alpha: float,
                        ops=None) -> Var:
    if ops is None:
        ops = template_operators(graph, alpha, dtype=e_user.value.dtype)
    p_user, s_user, p_item, s_item = ops
    x_users = numeric.add(numeric.spmm_var(p_user, e_item),
                          numeric.mul(Var(s_user[:, None]), b_user))
    x_items = numeric.add(numeric.spmm_var(p_item, e_user),
                          numeric.mul(Var(s_item[:, None]), b_item))
    return numeric.concat_rows(x_users, x_items)


def template_encode(graph: DomainGraph, params: DomainParams, alpha: float) -> Array:
    """Stacked (|U|+|I|) x d template-derived rows; zero for entities with
    no template neighbors."""
    return template_encode_var(graph, Var(params.e_user), Var(params.e_item),
                               Var(params.b_user), Var(params.b_item), alpha).value


def neighbor_matrix(index: NeighborIndex, n_users: int, n_items: int,
                    dtype=np.float64) -> sp.csr_matrix:
    """0/1 matrix on the stacked space selecting each row's top-K neighbors."""
    rows, cols = [], []
    for u, neigh in enumerate(index.user_neighbors):
        rows.extend([u] * len(neigh))
        cols.extend(neigh)
    for i, neigh in enumerate(index.item_neighbors):
        rows.extend([n_users + i] * len(neigh))
        cols.extend(n_users + j for j in neigh)
    n = n_users + n_items
    data = np.ones(len(rows), dtype=dtype)
    return sp.csr_matrix((data, (rows, cols)), shape=(n, n))


def aggregate_modal_var(x: Var, agg: sp.csr_matrix, k: int) -> Var:
    """x + (1/K) * sum of neighbor rows.  The divisor is the configured K
    even when fewer than K neighbors exist."""
    return numeric.add(x, numeric.scale(numeric.spmm_var(agg, x), 1.0 / k))


def aggregate_modal(x: Array, index: NeighborIndex, n_users: int, n_items: int) -> Array:
    agg = neighbor_matrix(index, n_users, n_items, dtype=x.dtype)
    return aggregate_modal_var(Var(x), agg, index.k).value


def propagate_var(x: Var, adj: sp.spmatrix, layers: int) -> Var:
    h = x
    acc = x
    for _ in range(layers):
        h = numeric.spmm_var(adj, h)
        acc = numeric.add(acc, h)
    return numeric.scale(acc, 1.0 / (layers + 1))


def propagate(x: Array, adj: sp.spmatrix, layers: int) -> Array:
    """Mean of propagation layers 0..L on the normalized adjacency."""
    return propagate_var(Var(x), adj, layers).value


def encode_domain_var(graph: DomainGraph, index: NeighborIndex | None,
                      e_user: Var, e_item: Var, b_user: Var, b_item: Var,
                      cfg: EncoderConfig, mode: str = "infer",
                      rng: np.random.Generator | None = None,
                      ops=None, adj: sp.spmatrix | None = None,
                      agg: sp.spmatrix | None = None) -> Representations:
    """Full encoding of one domain on the tape.

    `graph` must carry the adjacency for the current stage (train edges in
    training, train+new at inference).  Train mode applies inverted
    dropout to the template rows before aggregation; infer mode is
    deterministic.  `index=None` skips aggregation (the no-MM ablation).
    `ops`/`adj`/`agg` take precomputed sparse operators so per-batch
    encodes don't rebuild them.
    """
    if index is not None and (len(index.user_neighbors) != graph.n_users or
                              len(index.item_neighbors) != graph.n_items):
        raise ValueError("population mismatch between graph and neighbor index")
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")

    x = template_encode_var(graph, e_user, e_item, b_user, b_item, cfg.alpha,
                            ops=ops)
    if mode == "train" and cfg.dropout_p > 0.0:
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        keep = 1.0 - cfg.dropout_p
        mask = (rng.random(x.value.shape) < keep).astype(x.value.dtype) / keep
        x = numeric.mul(x, Var(mask))
    if index is not None:
        if agg is None:
            agg = neighbor_matrix(index, graph.n_users, graph.n_items,
                                  dtype=x.value.dtype)
        x_agg = aggregate_modal_var(x, agg, cfg.k)
    else:
        x_agg = x
    if adj is None:
        adj = numeric.normalized_adjacency(graph.n_users, graph.n_items,
                                           graph.edges(), dtype=x.value.dtype)
    r = propagate_var(x_agg, adj, cfg.layers)
    return Representations(x=x, x_agg=x_agg, r=r)


def encode_domain(graph: DomainGraph, index: NeighborIndex | None,
                  params: DomainParams, cfg: EncoderConfig,
                  mode: str = "infer",
                  rng: np.random.Generator | None = None) -> Representations:
    reps = encode_domain_var(graph, index, Var(params.e_user), Var(params.e_item),
                             Var(params.b_user), Var(params.b_item),
                             cfg, mode=mode, rng=rng)
    return reps


def mlp_apply(p_w1: Var, p_b1: Var, p_w2: Var, p_b2: Var, x: Var) -> Var:
    h = numeric.relu(numeric.add(numeric.matmul(x, p_w1), p_b1))
    return numeric.add(numeric.matmul(h, p_w2), p_b2)


# ---------------------------------------------------------------------------
# checkpoint io
# ---------------------------------------------------------------------------

def save_checkpoint(path, header: dict, tensors: dict[str, Array]) -> None:
    """Versioned single-file checkpoint: magic line, one JSON header line,
    then per tensor a `tensor <name> <rows> <cols>` line followed by
    row-major decimal floats (one row per line)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{CKPT_MAGIC} {CKPT_VERSION}\n")
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for name, tensor in tensors.items():
            mat = np.atleast_2d(np.asarray(tensor, dtype=np.float64))
            fh.write(f"tensor {name} {mat.shape[0]} {mat.shape[1]}\n")
            for row in mat:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_checkpoint(path) -> tuple[dict, dict[str, Array]]:
    with open(path, encoding="utf-8") as fh:
        magic = fh.readline().rstrip("\n")
        if magic != f"{CKPT_MAGIC} {CKPT_VERSION}":
            raise CheckpointError(f"{path}: bad checkpoint version line {magic!r}")
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: bad header: {exc}") from None
        tensors: dict[str, Array] = {}
        line = fh.readline()
        while line:
            parts = line.rstrip("\n").split(" ")
            if len(parts) != 4 or parts[0] != "tensor":
                raise CheckpointError(f"{path}: bad tensor line {line!r}")
            name, rows, cols = parts[1], int(parts[2]), int(parts[3])
            mat = np.empty((rows, cols), dtype=np.float64)
            for r in range(rows):
                vals = fh.readline().rstrip("\n").split(" ")
                if len(vals) != cols:
                    raise CheckpointError(f"{path}: tensor {name} row {r} truncated")
                mat[r] = [float(v) for v in vals]
            tensors[name] = mat
            line = fh.readline()
    return header, tensors
