"""Joint optimization loop: batching, negative sampling, the alpha
schedule, Adam updates, early stopping on validation recall, and
resumable training state.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import numeric
from .encoder import (DomainParams, EncoderConfig, ModelParams,
                      encode_domain_var, init_domain_params, init_mlp_params,
                      load_checkpoint, named_tensors, neighbor_matrix,
                      params_from_named, save_checkpoint, template_operators)
from .evaluation import NoEvaluableUsersError, evaluate, ranking_contexts
from .features import NeighborIndex, build_neighbor_index, derive_user_features
from .graph import (DomainGraph, OverlapMap, SplitBundle, graph_with_edges,
                    select_templates, with_templates)
from .numeric import Var
from .objective import (LossWeights, OverlapBatch, TripletBatch, bpr_loss,
                        contrastive_loss, joint_loss, se_loss)

logger = logging.getLogger(__name__)

Array = np.ndarray


class DivergenceError(RuntimeError):
    """Non-finite loss; carries a diagnostic dump of the offending batch."""

    def __init__(self, message, epoch=None, batch_index=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch_index = batch_index
        self.batch = batch


@dataclass
class TrainConfig:
    epochs_max: int = 1000
    patience: int = 50
    batches_per_epoch: int = 100
    overlap_batch: int = 64
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    alpha_start: float = 0.5
    alpha_end: float = 1.0
    seed: int = 0
    eval_n: int = 20

    def __post_init__(self):
        if self.patience > self.epochs_max:
            raise ValueError("patience must not exceed epochs_max")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class DomainData:
    """Everything the loop needs for one domain: the relabeled graph with
    templates, the split, item features, the train-edge view, and the
    multimodal neighbor index built over train-derived user features."""
    graph: DomainGraph
    split: SplitBundle
    item_text: Array
    item_vis: Array
    w: float
    k: int
    modality: str
    use_mm: bool
    train_view: DomainGraph = field(init=False)
    index: NeighborIndex | None = field(init=False)
    template_user_pos: dict[int, int] = field(init=False)
    template_item_pos: dict[int, int] = field(init=False)

    def __post_init__(self):
        self.train_view = graph_with_edges(self.graph, self.split.train)
        if self.use_mm:
            users = derive_user_features(self.train_view.user_items,
                                         self.item_text, self.item_vis)
            self.index = build_neighbor_index(users, self.item_text, self.item_vis,
                                              self.w, self.k, self.modality)
        else:
            self.index = None
        self.template_user_pos = {u: p for p, u in enumerate(self.graph.template_users)}
        self.template_item_pos = {i: p for p, i in enumerate(self.graph.template_items)}


def build_domain_data(graph: DomainGraph, split: SplitBundle,
                      item_text: Array, item_vis: Array,
                      k: int = 3, w: float = 0.9,
                      template_policy: str = "all-seen",
                      template_m: int | None = None,
                      use_mm: bool = True,
                      modality: str = "fused",
                      templates: tuple | None = None) -> DomainData:
    """Select templates on the train view (or take them as given, e.g. from
    a checkpoint) and assemble the training bundle."""
    if templates is None:
        train_view = graph_with_edges(graph, split.train)
        templates = select_templates(train_view, template_policy, template_m)
    graph = with_templates(graph, *templates)
    return DomainData(graph=graph, split=split, item_text=item_text,
                      item_vis=item_vis, w=w, k=k, modality=modality,
                      use_mm=use_mm)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def sample_triplets(view: DomainGraph, batches_per_epoch: int,
                    rng: np.random.Generator) -> list[TripletBatch]:
    """One epoch of BPR batches: every train edge appears once as a
    positive, partitioned into `batches_per_epoch` batches; each positive
    gets one uniform rejection-sampled negative outside N_u."""
    pos_sets = [frozenset(items) for items in view.user_items]
    edges = [(u, i) for u, items in enumerate(view.user_items) for i in items
             if len(items) < view.n_items]
    for u, items in enumerate(view.user_items):
        if items and len(items) >= view.n_items:
            logger.warning("user %d interacts with every item; skipped in sampling", u)
    if not edges:
        raise ValueError("no train edges to sample from")
    order = rng.permutation(len(edges))
    users = np.array([edges[j][0] for j in order], dtype=np.int64)
    pos = np.array([edges[j][1] for j in order], dtype=np.int64)
    neg = np.empty(len(edges), dtype=np.int64)
    for row, u in enumerate(users):
        banned = pos_sets[u]
        while True:
            cand = int(rng.integers(view.n_items))
            if cand not in banned:
                neg[row] = cand
                break
    batches = []
    for sel in np.array_split(np.arange(len(edges)), batches_per_epoch):
        if len(sel):
            batches.append(TripletBatch(users=users[sel], pos=pos[sel], neg=neg[sel]))
    return batches


def se_batch_for(batch: TripletBatch, data: DomainData,
                 rng: np.random.Generator) -> TripletBatch:
    """Template-restricted triples for the self-enhanced loss.

    Reuses the batch's (user, positive) pairs that are template entities
    and resamples the negative from the template items outside N_u;
    indices are positions within the template embedding tables."""
    t_items = data.graph.template_items
    u_pos, i_pos, i_neg = [], [], []
    user_sets = data.train_view.user_items
    for u, i in zip(batch.users, batch.pos):
        pu = data.template_user_pos.get(int(u))
        pi = data.template_item_pos.get(int(i))
        if pu is None or pi is None:
            continue
        banned = user_sets[int(u)]
        if len(banned) >= len(t_items):
            eligible = [t for t in t_items if t not in banned]
            if not eligible:
                continue
            cand = eligible[int(rng.integers(len(eligible)))]
        else:
            while True:
                cand = t_items[int(rng.integers(len(t_items)))]
                if cand not in banned:
                    break
        u_pos.append(pu)
        i_pos.append(pi)
        i_neg.append(data.template_item_pos[cand])
    return TripletBatch(users=np.array(u_pos, dtype=np.int64),
                        pos=np.array(i_pos, dtype=np.int64),
                        neg=np.array(i_neg, dtype=np.int64))


def eligible_overlap(overlap: OverlapMap | None, data_a: DomainData,
                     data_b: DomainData | None) -> list[tuple[int, int]]:
    """Overlap pairs usable for the contrastive loss at training time:
    both sides must be seen (unseen users have no representation yet)."""
    if overlap is None or data_b is None:
        return []
    return [(a, b) for a, b in overlap.pairs
            if a < data_a.graph.n_seen_users and b < data_b.graph.n_seen_users]


# ---------------------------------------------------------------------------
# schedule and optimizer
# ---------------------------------------------------------------------------

def alpha_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear interpolation of the normalization coefficient over the full
    epoch budget."""
    if not 0 <= epoch < cfg.epochs_max:
        raise ValueError("epoch out of schedule range")
    if cfg.epochs_max == 1:
        return cfg.alpha_start
    frac = epoch / (cfg.epochs_max - 1)
    return cfg.alpha_start + (cfg.alpha_end - cfg.alpha_start) * frac


class Adam:
    def __init__(self, tensors: dict[str, Array], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(v) for n, v in tensors.items()}
        self.v = {n: np.zeros_like(v) for n, v in tensors.items()}

    def step(self, tensors: dict[str, Array], grads: dict[str, Array]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name in tensors:
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            tensors[name] -= self.lr * (self.m[name] / c1) / (
                np.sqrt(self.v[name] / c2) + self.eps)


# ---------------------------------------------------------------------------
# training state (resume support)
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    epoch: int
    best_metric: float
    best_epoch: int
    adam_t: int
    rng_state: dict
    tensors: dict[str, Array]
    adam_m: dict[str, Array]
    adam_v: dict[str, Array]
    best_tensors: dict[str, Array]
    history: list[tuple[int, float, float, float, float]]


def save_train_state(path, state: TrainState) -> None:
    header = {
        "kind": "train-state",
        "epoch": state.epoch,
        "best_metric": state.best_metric,
        "best_epoch": state.best_epoch,
        "adam_t": state.adam_t,
        "rng_state": state.rng_state,
        "history": state.history,
    }
    tensors = {}
    for name, t in state.tensors.items():
        tensors[f"param.{name}"] = t
    for name, t in state.adam_m.items():
        tensors[f"adam_m.{name}"] = t
    for name, t in state.adam_v.items():
        tensors[f"adam_v.{name}"] = t
    for name, t in state.best_tensors.items():
        tensors[f"best.{name}"] = t
    save_checkpoint(path, header, tensors)


def load_train_state(path) -> TrainState:
    header, tensors = load_checkpoint(path)
    groups: dict[str, dict[str, Array]] = {"param": {}, "adam_m": {}, "adam_v": {}, "best": {}}
    for name, t in tensors.items():
        prefix, rest = name.split(".", 1)
        groups[prefix][rest] = t
    return TrainState(
        epoch=header["epoch"], best_metric=header["best_metric"],
        best_epoch=header["best_epoch"], adam_t=header["adam_t"],
        rng_state=header["rng_state"],
        tensors=groups["param"], adam_m=groups["adam_m"], adam_v=groups["adam_v"],
        best_tensors=groups["best"],
        history=[tuple(row) for row in header["history"]])


@dataclass
class TrainResult:
    params: ModelParams
    history: list[tuple[int, float, float, float, float]]
    best_epoch: int
    best_metric: float
    best_alpha: float
    stopped_epoch: int
    state: TrainState | None = None


# ---------------------------------------------------------------------------
# inference helpers
# ---------------------------------------------------------------------------

def inference_state(data: DomainData):
    """Graph view and neighbor index for inference: adjacency over
    train+new edges, user features re-derived so unseen users get rows,
    index rebuilt over the full population."""
    edges = list(data.split.train) + list(data.split.new)
    view = graph_with_edges(data.graph, edges)
    if data.use_mm:
        users = derive_user_features(view.user_items, data.item_text, data.item_vis)
        index = build_neighbor_index(users, data.item_text, data.item_vis,
                                     data.w, data.k, data.modality)
    else:
        index = None
    return view, index


def infer_representations(data: DomainData, dparams: DomainParams,
                          enc_cfg: EncoderConfig) -> Array:
    """Final representations with E_new revealed (deterministic)."""
    view, index = inference_state(data)
    reps = encode_domain_var(view, index, Var(dparams.e_user), Var(dparams.e_item),
                             Var(dparams.b_user), Var(dparams.b_item),
                             enc_cfg, mode="infer")
    return reps.r.value


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def _val_recall(data: DomainData, r: Array, eval_n: int) -> float | None:
    exclude, relevant = ranking_contexts(data.split, stage="val")
    if not relevant:
        return None
    try:
        report = evaluate(r, data.graph.n_users, data.graph.n_items,
                          exclude, relevant, [eval_n], domain=data.graph.tag)
    except NoEvaluableUsersError:
        return None
    return report.rows[0].recall / 100.0


def _domain_param_names(tag: str) -> list[str]:
    return [f"{tag}.e_user", f"{tag}.e_item", f"{tag}.b_user", f"{tag}.b_item",
            f"{tag}.w_se"]


def train(data_a: DomainData, data_b: DomainData | None,
          overlap: OverlapMap | None, enc_cfg: EncoderConfig,
          cfg: TrainConfig, weights: LossWeights,
          state: TrainState | None = None,
          until_epoch: int | None = None,
          log_every: int = 0) -> TrainResult:
    """Optimize the joint objective with Adam and early stopping.

    Early stopping watches the mean of the domains' validation Recall@N;
    when no domain has evaluable validation users the negated epoch loss
    stands in.  Returns the best-epoch parameters plus a resumable
    TrainState; `until_epoch` truncates the run (for checkpoint/resume).
    """
    rng = np.random.default_rng(cfg.seed)
    if state is None:
        dp_a = init_domain_params(rng, len(data_a.graph.template_users),
                                  len(data_a.graph.template_items), enc_cfg.d)
        dp_b = None
        if data_b is not None:
            dp_b = init_domain_params(rng, len(data_b.graph.template_users),
                                      len(data_b.graph.template_items), enc_cfg.d)
        params = ModelParams(a=dp_a, b=dp_b,
                             proj_a=init_mlp_params(rng, enc_cfg.d),
                             proj_b=init_mlp_params(rng, enc_cfg.d))
        tensors = named_tensors(params)
        adam = Adam(tensors, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        history: list[tuple] = []
        best_metric, best_epoch = -np.inf, -1
        best_tensors = {n: t.copy() for n, t in tensors.items()}
        start_epoch = 0
    else:
        tensors = {n: t.copy() for n, t in state.tensors.items()}
        params = params_from_named(tensors, two_domains=data_b is not None)
        tensors = named_tensors(params)
        adam = Adam(tensors, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        adam.t = state.adam_t
        adam.m = {n: t.copy().reshape(tensors[n].shape) for n, t in state.adam_m.items()}
        adam.v = {n: t.copy().reshape(tensors[n].shape) for n, t in state.adam_v.items()}
        rng.bit_generator.state = state.rng_state
        history = list(state.history)
        best_metric, best_epoch = state.best_metric, state.best_epoch
        best_tensors = {n: t.copy().reshape(tensors[n].shape)
                        for n, t in state.best_tensors.items()}
        start_epoch = state.epoch

    pairs = eligible_overlap(overlap, data_a, data_b)
    use_cl = (weights.gamma != 0.0 and len(pairs) >= 2 and data_b is not None)
    if weights.gamma != 0.0 and data_b is not None and len(pairs) < 2:
        logger.warning("fewer than 2 eligible overlapping users; contrastive loss disabled")
    pairs_arr = np.array(pairs, dtype=np.int64) if pairs else np.zeros((0, 2), np.int64)
    reg_w = weights.lam if data_b is None else weights.lam / 2.0
    a_adj = numeric.normalized_adjacency(data_a.graph.n_users, data_a.graph.n_items,
                                         data_a.split.train)
    a_agg = (neighbor_matrix(data_a.index, data_a.graph.n_users, data_a.graph.n_items)
             if data_a.index is not None else None)
    if data_b is not None:
        b_adj = numeric.normalized_adjacency(data_b.graph.n_users, data_b.graph.n_items,
                                             data_b.split.train)
        b_agg = (neighbor_matrix(data_b.index, data_b.graph.n_users, data_b.graph.n_items)
                 if data_b.index is not None else None)

    last_epoch = cfg.epochs_max if until_epoch is None else min(until_epoch, cfg.epochs_max)
    stopped = last_epoch - 1
    for epoch in range(start_epoch, last_epoch):
        alpha = alpha_at(epoch, cfg)
        enc = replace(enc_cfg, alpha=alpha)
        ops_a = template_operators(data_a.train_view, alpha)
        ops_b = template_operators(data_b.train_view, alpha) if data_b is not None else None
        batches_a = sample_triplets(data_a.train_view, cfg.batches_per_epoch, rng)
        batches_b = (sample_triplets(data_b.train_view, cfg.batches_per_epoch, rng)
                     if data_b is not None else None)

        epoch_loss = 0.0
        n_batches = len(batches_a)
        for b in range(n_batches):
            batch_a = batches_a[b]
            batch_b = batches_b[b % len(batches_b)] if batches_b else None
            se_a = se_batch_for(batch_a, data_a, rng)
            se_b = se_batch_for(batch_b, data_b, rng) if batch_b is not None else None
            if use_cl:
                take = min(cfg.overlap_batch, len(pairs_arr))
                sel = rng.choice(len(pairs_arr), size=take, replace=False)
                ob = OverlapBatch(users_a=pairs_arr[sel, 0], users_b=pairs_arr[sel, 1])
            else:
                ob = None

            var_map = {n: numeric.leaf(t) for n, t in tensors.items()}
            reg_list = list(var_map.values())
            reps_a = encode_domain_var(
                data_a.train_view, data_a.index,
                var_map["A.e_user"], var_map["A.e_item"],
                var_map["A.b_user"], var_map["A.b_item"],
                enc, mode="train", rng=rng, ops=ops_a, adj=a_adj, agg=a_agg)
            loss_bpr_a = bpr_loss(reps_a.r, data_a.graph.n_users, batch_a,
                                  reg_list, reg_w)
            loss_se_a = se_loss(var_map["A.e_user"], var_map["A.e_item"],
                                var_map["A.w_se"], se_a)
            loss_bpr_b = loss_se_b = None
            cl = None
            if data_b is not None and batch_b is not None:
                reps_b = encode_domain_var(
                    data_b.train_view, data_b.index,
                    var_map["B.e_user"], var_map["B.e_item"],
                    var_map["B.b_user"], var_map["B.b_item"],
                    enc, mode="train", rng=rng, ops=ops_b, adj=b_adj, agg=b_agg)
                loss_bpr_b = bpr_loss(reps_b.r, data_b.graph.n_users, batch_b,
                                      reg_list, reg_w)
                loss_se_b = se_loss(var_map["B.e_user"], var_map["B.e_item"],
                                    var_map["B.w_se"], se_b)
                if ob is not None:
                    cl = contrastive_loss(
                        reps_a.r, reps_b.r, ob,
                        (var_map["proj_a.w1"], var_map["proj_a.b1"],
                         var_map["proj_a.w2"], var_map["proj_a.b2"]),
                        (var_map["proj_b.w1"], var_map["proj_b.b1"],
                         var_map["proj_b.w2"], var_map["proj_b.b2"]),
                        weights.tau, weights.include_positive_in_denominator)
            loss = joint_loss(loss_bpr_a, loss_bpr_b, loss_se_a, loss_se_b, cl,
                              weights.beta, weights.gamma)
            if not np.isfinite(loss.value):
                raise DivergenceError(
                    f"non-finite loss {loss.value} at epoch {epoch} batch {b}; "
                    f"batch users={batch_a.users.tolist()} pos={batch_a.pos.tolist()} "
                    f"neg={batch_a.neg.tolist()}",
                    epoch=epoch, batch_index=b, batch=batch_a)
            names = list(tensors)
            grads = numeric.backward(loss, [var_map[n] for n in names])
            adam.step(tensors, dict(zip(names, grads)))
            epoch_loss += float(loss.value)

        epoch_loss /= n_batches
        rec_a = _val_recall(data_a, _encode_infer_trainview(
            data_a, var_named(tensors, "A"), enc, ops_a, a_adj, a_agg), cfg.eval_n)
        rec_b = None
        if data_b is not None:
            rec_b = _val_recall(data_b, _encode_infer_trainview(
                data_b, var_named(tensors, "B"), enc, ops_b, b_adj, b_agg), cfg.eval_n)
        recalls = [v for v in (rec_a, rec_b) if v is not None]
        metric = float(np.mean(recalls)) if recalls else -epoch_loss
        history.append((epoch, epoch_loss,
                        float("nan") if rec_a is None else rec_a,
                        float("nan") if rec_b is None else rec_b, alpha))
        if log_every and epoch % log_every == 0:
            logger.info("epoch %d loss %.6f metric %.6f alpha %.4f",
                        epoch, epoch_loss, metric, alpha)

        if metric > best_metric:
            best_metric, best_epoch = metric, epoch
            best_tensors = {n: t.copy() for n, t in tensors.items()}
        elif epoch - best_epoch > cfg.patience:
            stopped = epoch
            break
        stopped = epoch

    final = params_from_named(best_tensors, two_domains=data_b is not None)
    end_state = make_state(stopped + 1, best_metric, best_epoch, adam, rng,
                           tensors, best_tensors, history)
    return TrainResult(params=final, history=history, best_epoch=best_epoch,
                       best_metric=best_metric,
                       best_alpha=alpha_at(max(best_epoch, 0), cfg),
                       stopped_epoch=stopped, state=end_state)


def var_named(tensors: dict[str, Array], tag: str) -> DomainParams:
    return DomainParams(e_user=tensors[f"{tag}.e_user"], e_item=tensors[f"{tag}.e_item"],
                        b_user=tensors[f"{tag}.b_user"], b_item=tensors[f"{tag}.b_item"],
                        w_se=tensors[f"{tag}.w_se"])


def _encode_infer_trainview(data: DomainData, dparams: DomainParams,
                            enc: EncoderConfig, ops, adj, agg) -> Array:
    reps = encode_domain_var(data.train_view, data.index,
                             Var(dparams.e_user), Var(dparams.e_item),
                             Var(dparams.b_user), Var(dparams.b_item),
                             enc, mode="infer", ops=ops, adj=adj, agg=agg)
    return reps.r.value


def make_state(epoch: int, best_metric: float, best_epoch: int, adam: Adam,
               rng: np.random.Generator, tensors, best_tensors, history) -> TrainState:
    return TrainState(epoch=epoch, best_metric=best_metric, best_epoch=best_epoch,
                      adam_t=adam.t, rng_state=rng.bit_generator.state,
                      tensors={n: t.copy() for n, t in tensors.items()},
                      adam_m={n: t.copy() for n, t in adam.m.items()},
                      adam_v={n: t.copy() for n, t in adam.v.items()},
                      best_tensors={n: t.copy() for n, t in best_tensors.items()},
                      history=list(history))


def history_lines(history) -> list[str]:
    """Line-delimited `epoch loss recallA recallB alpha` records."""
    return [f"{int(e)} {repr(float(l))} {repr(float(ra))} {repr(float(rb))} "
            f"{repr(float(al))}" for e, l, ra, rb, al in history]
