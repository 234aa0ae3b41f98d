"""Tests for sampling, the alpha schedule, Adam training, early stopping,
and checkpoint/resume determinism."""

import numpy as np
import pytest

from micrec import numeric
from micrec.encoder import EncoderConfig, init_domain_params, named_tensors
from micrec.graph import graph_from_edges, make_inductive_split
from micrec.numeric import Var
from micrec.objective import LossWeights, TripletBatch, bpr_loss
from micrec.synth import planted_domain, planted_pair, permuted_blocks_and_features
from micrec.trainer import (Adam, DivergenceError, TrainConfig, alpha_at,
                            build_domain_data, load_train_state,
                            sample_triplets, save_train_state, train)
from micrec.graph import OverlapMap


class TestSampleTriplets:
    def test_single_candidate_negative_forced(self):
        view = graph_from_edges("A", 1, 2, [(0, 0)])
        batches = sample_triplets(view, 1, np.random.default_rng(0))
        (batch,) = batches
        assert batch.users.tolist() == [0]
        assert batch.pos.tolist() == [0]
        assert batch.neg.tolist() == [1]

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(3)
        edges = sorted({(int(rng.integers(6)), int(rng.integers(8)))
                        for _ in range(25)})
        view = graph_from_edges("A", 6, 8, edges)
        one = sample_triplets(view, 4, np.random.default_rng(11))
        two = sample_triplets(view, 4, np.random.default_rng(11))
        for a, b in zip(one, two):
            assert np.array_equal(a.users, b.users)
            assert np.array_equal(a.neg, b.neg)

    def test_every_edge_appears_once_per_epoch(self):
        edges = [(0, 0), (0, 1), (1, 2), (2, 0), (2, 3)]
        view = graph_from_edges("A", 3, 5, edges)
        batches = sample_triplets(view, 2, np.random.default_rng(5))
        drawn = sorted((int(u), int(i)) for b in batches
                       for u, i in zip(b.users, b.pos))
        assert drawn == sorted(edges)

    def test_negatives_avoid_train_items(self):
        edges = [(0, 0), (0, 1), (0, 2)]
        view = graph_from_edges("A", 1, 5, edges)
        for seed in range(20):
            for batch in sample_triplets(view, 1, np.random.default_rng(seed)):
                assert all(n in (3, 4) for n in batch.neg)

    def test_negative_frequencies_uniform(self):
        # 500 users each pinned to item 0; negatives uniform over 1..5
        edges = [(u, 0) for u in range(500)]
        view = graph_from_edges("A", 500, 6, edges)
        rng = np.random.default_rng(0)
        counts = np.zeros(6)
        draws = 0
        for _ in range(100):
            for batch in sample_triplets(view, 1, rng):
                for n in batch.neg:
                    counts[n] += 1
                    draws += 1
        assert counts[0] == 0
        p = 1.0 / 5.0
        sigma = np.sqrt(draws * p * (1 - p))
        for item in range(1, 6):
            assert abs(counts[item] - draws * p) <= 3 * sigma


class TestAlphaSchedule:
    def test_endpoints(self):
        cfg = TrainConfig(epochs_max=1000, patience=50)
        assert alpha_at(0, cfg) == 0.5
        assert alpha_at(999, cfg) == 1.0

    def test_midpoint_value(self):
        cfg = TrainConfig(epochs_max=1000, patience=50)
        assert alpha_at(500, cfg) == pytest.approx(0.5 + 0.5 * 500 / 999)

    def test_monotone_and_bounded(self):
        cfg = TrainConfig(epochs_max=200, patience=10)
        vals = [alpha_at(e, cfg) for e in range(200)]
        assert all(a <= b for a, b in zip(vals, vals[1:]))
        assert min(vals) >= cfg.alpha_start and max(vals) <= cfg.alpha_end

    def test_out_of_range_epoch(self):
        cfg = TrainConfig(epochs_max=10, patience=1)
        with pytest.raises(ValueError):
            alpha_at(10, cfg)


class TestAdamDescent:
    def test_fixed_batch_loss_decreases_monotonically(self):
        rng = np.random.default_rng(0)
        params = init_domain_params(rng, 4, 5, 6)
        graph = graph_from_edges("A", 4, 5, [(0, 0), (0, 1), (1, 2), (2, 3),
                                             (3, 4), (1, 0)])
        batch = TripletBatch(users=np.array([0, 1, 2, 3]),
                             pos=np.array([0, 2, 3, 4]),
                             neg=np.array([4, 3, 1, 0]))
        adj = numeric.normalized_adjacency(4, 5, graph.edges())
        tensors = {"e_user": params.e_user, "e_item": params.e_item}
        adam = Adam(tensors, lr=1e-3)
        losses = []
        for _ in range(12):
            e_item = numeric.leaf(tensors["e_item"])
            e_user = numeric.leaf(tensors["e_user"])
            stacked = numeric.concat_rows(e_user, e_item)
            r = numeric.spmm_var(adj, stacked)
            loss = bpr_loss(numeric.add(r, stacked), 4, batch)
            grads = numeric.backward(loss, [e_user, e_item])
            adam.step(tensors, {"e_user": grads[0], "e_item": grads[1]})
            losses.append(float(loss.value))
        assert all(a > b for a, b in zip(losses, losses[1:]))


def single_domain_data(seed=0, n_users=40, n_items=30, edges_per_user=8,
                       use_mm=True):
    rng = np.random.default_rng(seed)
    dom = planted_domain(rng, "A", n_users, n_items, edges_per_user,
                         feat_noise=0.3)
    relabeled, bundle, u_perm, i_perm = make_inductive_split(
        dom.graph, unseen_frac=0.15, seed=seed)
    dom2 = permuted_blocks_and_features(dom, u_perm, i_perm)
    return build_domain_data(relabeled, bundle, dom2.item_text, dom2.item_vis,
                             k=2, w=0.9, use_mm=use_mm)


class TestTrainLoop:
    def test_bpr_only_training_improves_validation_recall(self):
        data = single_domain_data(seed=1)
        enc = EncoderConfig(d=16, alpha=0.5, k=2, layers=2, dropout_p=0.1)
        cfg = TrainConfig(epochs_max=50, patience=50, batches_per_epoch=5,
                          lr=5e-2, seed=1)
        weights = LossWeights(lam=1e-5, beta=0.0, gamma=0.0)
        result = train(data, None, None, enc, cfg, weights)
        first = result.history[0]
        assert result.best_metric > first[2]  # recall at epoch 0

    def test_patience_zero_stops_at_first_non_improvement(self):
        data = single_domain_data(seed=2)
        enc = EncoderConfig(d=8, alpha=0.5, k=2, layers=1, dropout_p=0.0)
        cfg = TrainConfig(epochs_max=30, patience=0, batches_per_epoch=2,
                          lr=1e-12, seed=2)
        weights = LossWeights(lam=0.0, beta=0.0, gamma=0.0)
        result = train(data, None, None, enc, cfg, weights)
        # lr ~ 0: metric can never improve after epoch 0, so we stop at 1
        assert result.stopped_epoch == 1
        assert result.best_epoch == 0

    def test_best_metric_equals_history_max(self):
        data = single_domain_data(seed=3)
        enc = EncoderConfig(d=8, alpha=0.5, k=2, layers=1, dropout_p=0.1)
        cfg = TrainConfig(epochs_max=8, patience=8, batches_per_epoch=3,
                          lr=2e-2, seed=3)
        weights = LossWeights(beta=0.0, gamma=0.0)
        result = train(data, None, None, enc, cfg, weights)
        recalls = [row[2] for row in result.history]
        assert result.best_metric == pytest.approx(max(recalls))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts_with_diagnostics(self):
        data = single_domain_data(seed=4)
        enc = EncoderConfig(d=8, alpha=0.5, k=2, layers=1, dropout_p=0.0)
        cfg = TrainConfig(epochs_max=4, patience=4, batches_per_epoch=3,
                          lr=1e200, seed=4)
        weights = LossWeights(lam=1e-4, beta=0.0, gamma=0.0)
        with pytest.raises(DivergenceError) as exc:
            train(data, None, None, enc, cfg, weights)
        assert exc.value.batch is not None

    def test_two_domain_training_with_contrastive(self):
        rng = np.random.default_rng(5)
        pair = planted_pair(rng, n_users=24, n_items_a=20, n_items_b=16,
                            edges_per_user_a=10, sparsity_factor=5)
        ga, ba, pa_u, pa_i = make_inductive_split(pair.a.graph, 0.1, seed=5)
        gb, bb, pb_u, pb_i = make_inductive_split(pair.b.graph, 0.1, seed=6)
        a2 = permuted_blocks_and_features(pair.a, pa_u, pa_i)
        b2 = permuted_blocks_and_features(pair.b, pb_u, pb_i)
        data_a = build_domain_data(ga, ba, a2.item_text, a2.item_vis, k=2)
        data_b = build_domain_data(gb, bb, b2.item_text, b2.item_vis, k=2)
        overlap = OverlapMap(pairs=tuple(
            (int(pa_u[a]), int(pb_u[b])) for a, b in pair.overlap.pairs))
        enc = EncoderConfig(d=8, alpha=0.5, k=2, layers=2, dropout_p=0.1)
        cfg = TrainConfig(epochs_max=4, patience=4, batches_per_epoch=3,
                          overlap_batch=8, lr=1e-2, seed=7)
        result = train(data_a, data_b, overlap, enc, cfg,
                       LossWeights(tau=0.2))
        assert len(result.history) == 4
        assert np.isfinite([row[1] for row in result.history]).all()


class TestResume:
    def test_resume_reproduces_uninterrupted_run(self, tmp_path):
        data = single_domain_data(seed=6)
        enc = EncoderConfig(d=8, alpha=0.5, k=2, layers=1, dropout_p=0.2)
        cfg = TrainConfig(epochs_max=6, patience=6, batches_per_epoch=3,
                          lr=1e-2, seed=6)
        weights = LossWeights(beta=0.0, gamma=0.0)

        full = train(data, None, None, enc, cfg, weights)

        part = train(data, None, None, enc, cfg, weights, until_epoch=3)
        path = tmp_path / "state.ckpt"
        save_train_state(path, part.state)
        state = load_train_state(path)
        resumed = train(data, None, None, enc, cfg, weights, state=state)

        assert len(resumed.history) == len(full.history)
        for a, b in zip(full.history, resumed.history):
            assert a[0] == b[0]
            assert abs(a[1] - b[1]) <= 1e-6  # next-epoch loss reproduced
            assert a[4] == b[4]
