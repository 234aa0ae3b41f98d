"""Loss terms and the joint objective.

All losses are built on the reverse-mode tape; callers get a scalar Var
and pull gradients with numeric.backward.  Scores are plain dot products
between final representations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric
from .encoder import MlpParams, mlp_apply
from .numeric import Var

Array = np.ndarray


class EmptyBatchError(ValueError):
    pass


class BatchTooSmallError(ValueError):
    """Contrastive batches need at least two users for a denominator."""


@dataclass(frozen=True)
class TripletBatch:
    """(user, positive item, negative item) triples; negatives are checked
    against the train adjacency at sampling time."""
    users: Array
    pos: Array
    neg: Array

    def __len__(self):
        return len(self.users)


@dataclass(frozen=True)
class OverlapBatch:
    """Shared persons with their per-domain user ids."""
    users_a: Array
    users_b: Array

    def __len__(self):
        return len(self.users_a)


@dataclass
class LossWeights:
    lam: float = 1e-4
    beta: float = 0.01
    gamma: float = 1.0
    tau: float = 0.2
    include_positive_in_denominator: bool = False

    def __post_init__(self):
        if min(self.lam, self.beta, self.gamma) < 0 or self.tau <= 0:
            raise ValueError("weights must be >= 0 and tau > 0")


def _pairwise_bpr(score_pos: Var, score_neg: Var) -> Var:
    """Mean of -log sigmoid(s_pos - s_neg)."""
    return numeric.mean_all(numeric.softplus(numeric.sub(score_neg, score_pos)))


def bpr_loss(r: Var, n_users: int, batch: TripletBatch,
             reg_tensors: list[Var] | None = None,
             reg_weight: float = 0.0) -> Var:
    """Sampled BPR: mean over triples of -log sigmoid(s(u,i) - s(u,i-)),
    plus reg_weight * sum of squared parameter tensors."""
    if len(batch) == 0:
        raise EmptyBatchError("BPR batch is empty")
    ru = numeric.gather_rows(r, batch.users)
    ri = numeric.gather_rows(r, batch.pos + n_users)
    rj = numeric.gather_rows(r, batch.neg + n_users)
    s_pos = numeric.row_sum(numeric.mul(ru, ri))
    s_neg = numeric.row_sum(numeric.mul(ru, rj))
    loss = _pairwise_bpr(s_pos, s_neg)
    if reg_weight > 0.0 and reg_tensors:
        reg = numeric.square_sum(reg_tensors[0])
        for t in reg_tensors[1:]:
            reg = numeric.add(reg, numeric.square_sum(t))
        loss = numeric.add(loss, numeric.scale(reg, reg_weight))
    return loss


def se_loss(e_user: Var, e_item: Var, w_se: Var, batch: TripletBatch) -> Var:
    """Self-enhanced loss: BPR over template triples scoring
    s(e_u, W e_i) = e_u . (W e_i); indices address template positions.
    An empty batch is the degenerate no-template case and scores 0."""
    if len(batch) == 0:
        return Var(0.0)
    eu = numeric.gather_rows(e_user, batch.users)
    ei = numeric.gather_rows(e_item, batch.pos)
    ej = numeric.gather_rows(e_item, batch.neg)
    wt = numeric.transpose(w_se)
    s_pos = numeric.row_sum(numeric.mul(eu, numeric.matmul(ei, wt)))
    s_neg = numeric.row_sum(numeric.mul(eu, numeric.matmul(ej, wt)))
    return _pairwise_bpr(s_pos, s_neg)


def _mlp_vars(p: MlpParams | tuple[Var, Var, Var, Var]):
    if isinstance(p, MlpParams):
        return Var(p.w1), Var(p.b1), Var(p.w2), Var(p.b2)
    return p


def contrastive_loss(r_a: Var, r_b: Var, batch: OverlapBatch,
                     proj_a, proj_b, tau: float,
                     include_positive_in_denominator: bool = False) -> Var:
    """Cross-domain alignment on overlapping users.

    Both directions are summed; per direction the positive pair sits in
    the numerator while the denominator runs over the other batch members
    only (the positive itself is excluded unless the compatibility flag is
    set).  Ratios above one therefore make the loss negative; no clamping.
    """
    n = len(batch)
    if n < 2:
        raise BatchTooSmallError("contrastive batch needs >= 2 overlapping users")
    w1a, b1a, w2a, b2a = _mlp_vars(proj_a)
    w1b, b1b, w2b, b2b = _mlp_vars(proj_b)
    za = mlp_apply(w1a, b1a, w2a, b2a, numeric.gather_rows(r_a, batch.users_a))
    zb = mlp_apply(w1b, b1b, w2b, b2b, numeric.gather_rows(r_b, batch.users_b))
    logits = numeric.scale(numeric.matmul(za, numeric.transpose(zb)), 1.0 / tau)
    if include_positive_in_denominator:
        mask = np.ones((n, n), dtype=bool)
    else:
        mask = ~np.eye(n, dtype=bool)
    positives = numeric.diag_part(logits)
    l1 = numeric.mean_all(numeric.sub(numeric.logsumexp_rows(logits, mask), positives))
    l2 = numeric.mean_all(numeric.sub(
        numeric.logsumexp_rows(numeric.transpose(logits), mask.T), positives))
    return numeric.add(l1, l2)


def joint_loss(bpr_a: Var, bpr_b: Var | None, se_a: Var, se_b: Var | None,
               cl: Var | None, beta: float, gamma: float) -> Var:
    """(L_BPR^A + L_BPR^B) + beta (L_SE^A + L_SE^B) + gamma L_CL."""
    loss = bpr_a
    if bpr_b is not None:
        loss = numeric.add(loss, bpr_b)
    se = se_a
    if se_b is not None:
        se = numeric.add(se, se_b)
    if beta != 0.0:
        loss = numeric.add(loss, numeric.scale(se, beta))
    if cl is not None and gamma != 0.0:
        loss = numeric.add(loss, numeric.scale(cl, gamma))
    return loss
