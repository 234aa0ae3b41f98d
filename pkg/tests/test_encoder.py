"""Tests for template encoding, aggregation, propagation, and checkpoints."""

import numpy as np
import pytest

from micrec import numeric
from micrec.encoder import (CheckpointError, EncoderConfig, aggregate_modal,
                            encode_domain, init_domain_params, load_checkpoint,
                            propagate, save_checkpoint, template_encode)
from micrec.features import NeighborIndex, UserFeatures, build_neighbor_index
from micrec.graph import graph_from_edges, with_templates


def formula_template_encode(graph, params, alpha):
    """Independent oracle: evaluate the template sums entry by entry."""
    d = params.e_user.shape[1]
    t_users = {u: p for p, u in enumerate(graph.template_users)}
    t_items = {i: p for p, i in enumerate(graph.template_items)}
    x = np.zeros((graph.n_users + graph.n_items, d))
    for u in range(graph.n_users):
        hits = [i for i in graph.user_items[u] if i in t_items]
        coef = (len(hits) + 1.0) ** (-alpha)
        for i in hits:
            x[u] += coef * (params.e_item[t_items[i]] + params.b_user)
    for i in range(graph.n_items):
        hits = [u for u in graph.item_users[i] if u in t_users]
        coef = (len(hits) + 1.0) ** (-alpha)
        for u in hits:
            x[graph.n_users + i] += coef * (params.e_user[t_users[u]] + params.b_item)
    return x


def random_templated_graph(rng, n_users, n_items, p=0.4):
    edges = sorted({(int(u), int(i)) for u in range(n_users)
                    for i in range(n_items) if rng.random() < p})
    graph = graph_from_edges("A", n_users, n_items, edges)
    n_tu = int(rng.integers(1, n_users + 1))
    n_ti = int(rng.integers(1, n_items + 1))
    return with_templates(graph,
                          sorted(rng.choice(n_users, n_tu, replace=False).tolist()),
                          sorted(rng.choice(n_items, n_ti, replace=False).tolist()))


class TestTemplateEncode:
    def test_no_template_neighbors_gives_zero(self):
        graph = graph_from_edges("A", 2, 2, [(0, 1), (1, 0)])
        graph = with_templates(graph, [0, 1], [0])
        params = init_domain_params(np.random.default_rng(0), 2, 1, 3)
        x = template_encode(graph, params, alpha=1.0)
        assert np.all(x[0] == 0.0)  # user 0's only item (1) is not a template

    def test_worked_example(self):
        # two template items adjacent, d=2, alpha=1, bias (1,1)
        graph = graph_from_edges("A", 1, 2, [(0, 0), (0, 1)])
        graph = with_templates(graph, [0], [0, 1])
        params = init_domain_params(np.random.default_rng(0), 1, 2, 2)
        params.e_item[0] = [1.0, 0.0]
        params.e_item[1] = [0.0, 1.0]
        params.b_user[:] = [1.0, 1.0]
        x = template_encode(graph, params, alpha=1.0)
        assert np.allclose(x[0], [1.0, 1.0])

    def test_alpha_zero_single_neighbor(self):
        graph = graph_from_edges("A", 1, 1, [(0, 0)])
        graph = with_templates(graph, [0], [0])
        params = init_domain_params(np.random.default_rng(0), 1, 1, 2)
        params.e_item[0] = [2.0, 2.0]
        params.b_user[:] = 0.0
        x = template_encode(graph, params, alpha=0.0)
        assert np.allclose(x[0], [2.0, 2.0])

    def test_matches_formula_oracle_on_random_graphs(self):
        rng = np.random.default_rng(123)
        for _ in range(100):
            n_users = int(rng.integers(1, 7))
            n_items = int(rng.integers(1, 7))
            graph = random_templated_graph(rng, n_users, n_items)
            params = init_domain_params(rng, len(graph.template_users),
                                        len(graph.template_items), 4)
            alpha = float(rng.uniform(0.0, 1.5))
            got = template_encode(graph, params, alpha)
            want = formula_template_encode(graph, params, alpha)
            assert np.max(np.abs(got - want)) <= 1e-12

    def test_inductive_consistency(self):
        # new edges attached to OTHER users leave this user's x row alone
        rng = np.random.default_rng(5)
        graph = graph_from_edges("A", 3, 3, [(0, 0), (1, 1)])
        graph = with_templates(graph, [0, 1, 2], [0, 1, 2])
        params = init_domain_params(rng, 3, 3, 4)
        x1 = template_encode(graph, params, alpha=0.8)
        grown = graph_from_edges("A", 3, 3, [(0, 0), (1, 1), (2, 0), (2, 2)])
        grown = with_templates(grown, [0, 1, 2], [0, 1, 2])
        x2 = template_encode(grown, params, alpha=0.8)
        assert np.array_equal(x1[0], x2[0])
        assert np.array_equal(x1[1], x2[1])
        assert not np.array_equal(x1[2], x2[2])


class TestAggregate:
    def test_single_neighbor(self):
        x = np.array([[1.0, 0.0], [0.0, 2.0]])
        idx = NeighborIndex(k=1, user_neighbors=((1,), (0,)),
                            user_scores=((1.0,), (1.0,)),
                            item_neighbors=(), item_scores=())
        out = aggregate_modal(x, idx, n_users=2, n_items=0)
        assert np.allclose(out[0], [1.0, 2.0])

    def test_zero_neighbors_identity(self):
        x = np.array([[1.0, 1.0], [0.0, 0.0], [0.0, 0.0]])
        idx = NeighborIndex(k=2, user_neighbors=((1, 2), (0, 2), (0, 1)),
                            user_scores=((0.0,) * 2,) * 3,
                            item_neighbors=(), item_scores=())
        out = aggregate_modal(x, idx, n_users=3, n_items=0)
        assert np.allclose(out[0], x[0])  # neighbors are zero rows

    def test_divisor_is_configured_k(self):
        # population of 2 but K=2: single neighbor still divided by 2
        x = np.array([[0.0, 0.0], [2.0, 0.0]])
        idx = NeighborIndex(k=2, user_neighbors=((1,), (0,)),
                            user_scores=((1.0,), (1.0,)),
                            item_neighbors=(), item_scores=())
        out = aggregate_modal(x, idx, n_users=2, n_items=0)
        assert np.allclose(out[0], [1.0, 0.0])


def dense_propagate_oracle(x, adj_dense, layers):
    out = np.zeros_like(x)
    h = x.copy()
    out += h
    for _ in range(layers):
        h = adj_dense @ h
        out += h
    return out / (layers + 1)


class TestPropagate:
    def test_zero_layers_identity(self):
        x = np.random.default_rng(0).normal(size=(4, 3))
        adj = numeric.normalized_adjacency(2, 2, [(0, 0), (1, 1)])
        assert np.array_equal(propagate(x, adj, 0), x)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(25):
            n_users = int(rng.integers(1, 11))
            n_items = int(rng.integers(1, 10))
            edges = sorted({(int(rng.integers(n_users)), int(rng.integers(n_items)))
                            for _ in range(rng.integers(0, 25))})
            adj = numeric.normalized_adjacency(n_users, n_items, edges)
            x = rng.normal(size=(n_users + n_items, 3))
            layers = int(rng.integers(0, 4))
            want = dense_propagate_oracle(x, adj.toarray(), layers)
            assert np.max(np.abs(propagate(x, adj, layers) - want)) <= 1e-10

    def test_disconnected_node_scales_by_layer_count(self):
        # node with no edges only keeps its layer-0 term
        adj = numeric.normalized_adjacency(2, 2, [(0, 0)])
        x = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0], [4.0, 4.0]])
        out = propagate(x, adj, 2)
        assert np.allclose(out[1], x[1] / 3.0)
        assert np.allclose(out[3], x[3] / 3.0)


class TestEncodeDomain:
    def _setup(self, rng, dropout=0.0):
        graph = graph_from_edges("A", 3, 4, [(0, 0), (0, 1), (1, 1), (2, 3)])
        graph = with_templates(graph, [0, 1, 2], [0, 1, 2, 3])
        text = rng.normal(size=(4, 3))
        users = UserFeatures(text=rng.normal(size=(3, 3)),
                             visual=rng.normal(size=(3, 3)))
        index = build_neighbor_index(users, text, text, w=0.5, k=2)
        params = init_domain_params(rng, 3, 4, 4)
        cfg = EncoderConfig(d=4, alpha=0.7, k=2, layers=2, dropout_p=dropout)
        return graph, index, params, cfg

    def test_no_dropout_train_equals_infer(self):
        rng = np.random.default_rng(1)
        graph, index, params, cfg = self._setup(rng)
        r1 = encode_domain(graph, index, params, cfg, mode="train",
                           rng=np.random.default_rng(0)).r.value
        r2 = encode_domain(graph, index, params, cfg, mode="infer").r.value
        assert np.array_equal(r1, r2)

    def test_infer_deterministic(self):
        rng = np.random.default_rng(2)
        graph, index, params, cfg = self._setup(rng)
        r1 = encode_domain(graph, index, params, cfg).r.value
        r2 = encode_domain(graph, index, params, cfg).r.value
        assert np.array_equal(r1, r2)

    def test_new_edge_gives_unseen_user_nonzero_row(self):
        rng = np.random.default_rng(3)
        edges = [(0, 0), (0, 1), (1, 1)]
        graph = graph_from_edges("A", 3, 2, edges, n_seen_users=2, n_seen_items=2)
        graph = with_templates(graph, [0, 1], [0, 1])
        params = init_domain_params(rng, 2, 2, 4)
        cfg = EncoderConfig(d=4, alpha=1.0, k=1, layers=1, dropout_p=0.0)
        before = encode_domain(graph, None, params, cfg).r.value
        assert np.all(before[2] == 0.0)
        grown = graph_from_edges("A", 3, 2, edges + [(2, 0)],
                                 n_seen_users=2, n_seen_items=2)
        grown = with_templates(grown, [0, 1], [0, 1])
        after = encode_domain(grown, None, params, cfg).r.value
        assert np.any(after[2] != 0.0)

    def test_population_mismatch_rejected(self):
        rng = np.random.default_rng(4)
        graph, index, params, cfg = self._setup(rng)
        small = graph_from_edges("A", 2, 2, [(0, 0)])
        small = with_templates(small, [0, 1], [0, 1])
        with pytest.raises(ValueError):
            encode_domain(small, index, params, cfg)

    def test_dropout_preserves_expectation(self):
        rng = np.random.default_rng(5)
        graph, index, params, cfg = self._setup(rng, dropout=0.5)
        base = encode_domain(graph, index, params, cfg, mode="infer").r.value
        draws = 10_000
        gen = np.random.default_rng(99)
        acc = np.zeros_like(base)
        acc2 = np.zeros_like(base)
        for _ in range(draws):
            r = encode_domain(graph, index, params, cfg, mode="train", rng=gen).r.value
            acc += r
            acc2 += r * r
        mean = acc / draws
        se = np.sqrt(np.maximum(acc2 / draws - mean ** 2, 0.0) / draws)
        assert np.all(np.abs(mean - base) <= 3.0 * se + 1e-12)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {"A.e_user": rng.normal(size=(3, 4)),
                   "A.b_user": rng.normal(size=(1, 4))}
        header = {"config": {"d": 4}, "note": "x"}
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, header, tensors)
        h2, t2 = load_checkpoint(path)
        assert h2 == header
        for name in tensors:
            assert np.array_equal(t2[name], tensors[name])

    def test_version_check(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_text("MICREC-CKPT v0\n{}\n")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_byte_identical_rewrite(self, tmp_path):
        rng = np.random.default_rng(1)
        tensors = {"t": rng.normal(size=(2, 2))}
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, {"s": 1}, tensors)
        save_checkpoint(p2, {"s": 1}, tensors)
        assert p1.read_bytes() == p2.read_bytes()
