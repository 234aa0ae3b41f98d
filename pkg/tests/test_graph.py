"""Tests for ingestion, the inductive split, and template selection."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from micrec import graph as g


def rec(u, i, rating=5.0, ts=None):
    return (u, i, rating, ts)


class TestIngest:
    def test_all_filtered_is_empty_domain(self):
        records = [rec(f"u{k}", f"i{k}") for k in range(3)]
        with pytest.raises(g.EmptyDomainError):
            g.ingest(records, min_rating=4.0, min_degree=10)

    def test_min_rating_drops_low_records(self):
        records = [rec("u0", "i0", 5.0), rec("u0", "i1", 3.0),
                   rec("u1", "i0", 4.0), rec("u1", "i1", 4.5)]
        graph, users, items = g.ingest(records, min_rating=4.0, min_degree=0)
        assert ("u0", "i1") not in {(u, i) for u in users for i in items
                                    if (users[u], items[i]) in set(graph.edges())}
        assert graph.n_edges == 3

    def test_ids_by_first_appearance(self):
        records = [rec("bob", "x"), rec("alice", "y"), rec("bob", "y"),
                   rec("alice", "x")]
        _, users, items = g.ingest(records, min_degree=0)
        assert users == {"bob": 0, "alice": 1}
        assert items == {"x": 0, "y": 1}

    def test_duplicate_edges_collapse(self):
        records = [rec("u", "i"), rec("u", "i", 4.5)]
        graph, _, _ = g.ingest(records, min_degree=0)
        assert graph.n_edges == 1

    def test_fixpoint_filtering_cascades(self):
        # u2 passes the first degree pass with 2 edges, but i2's removal
        # must cascade and take u2 down with it.
        records = [rec("u0", "i0"), rec("u0", "i1"), rec("u1", "i0"),
                   rec("u1", "i1"), rec("u2", "i0"), rec("u2", "i2")]
        graph, users, items = g.ingest(records, min_degree=1)
        assert "u2" not in users and "i2" not in items
        for u in range(graph.n_users):
            assert len(graph.user_items[u]) > 1
        for i in range(graph.n_items):
            assert len(graph.item_users[i]) > 1

    def test_fixpoint_invariant_random(self):
        rng = np.random.default_rng(3)
        records = [rec(f"u{rng.integers(12)}", f"i{rng.integers(12)}")
                   for _ in range(150)]
        graph, _, _ = g.ingest(records, min_degree=2)
        for u in range(graph.n_users):
            assert len(graph.user_items[u]) > 2
        for i in range(graph.n_items):
            assert len(graph.item_users[i]) > 2

    def test_adjacency_symmetry(self):
        records = [rec(f"u{k % 4}", f"i{(k * 3) % 5}") for k in range(16)]
        graph, _, _ = g.ingest(records, min_degree=0)
        for u, items in enumerate(graph.user_items):
            for i in items:
                assert u in graph.item_users[i]


def toy_graph(rng, n_users=10, n_items=10, p=0.5, tag="A"):
    edges = sorted({(int(u), int(i)) for u in range(n_users)
                    for i in range(n_items) if rng.random() < p})
    return g.graph_from_edges(tag, n_users, n_items, edges)


class TestInductiveSplit:
    def test_zero_unseen_frac(self):
        rng = np.random.default_rng(0)
        graph = toy_graph(rng)
        out, bundle, _, _ = g.make_inductive_split(graph, unseen_frac=0.0, seed=1)
        assert bundle.new == ()
        assert out.n_seen_users == out.n_users
        assert out.n_seen_items == out.n_items

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(0)
        graph = toy_graph(rng)
        one = g.make_inductive_split(graph, 0.2, seed=42)
        two = g.make_inductive_split(graph, 0.2, seed=42)
        assert one[1] == two[1]
        assert np.array_equal(one[2], two[2])

    def test_new_edges_touch_unseen(self):
        # brute-force scan on a ~50-edge random graph
        rng = np.random.default_rng(5)
        graph = toy_graph(rng, 12, 12, p=0.35)
        out, bundle, _, _ = g.make_inductive_split(graph, 0.25, seed=9)
        assert bundle.new
        for u, i in bundle.new:
            assert u >= out.n_seen_users or i >= out.n_seen_items

    def test_coverage_and_disjointness(self):
        rng = np.random.default_rng(1)
        graph = toy_graph(rng, 15, 12, p=0.4)
        out, bundle, _, _ = g.make_inductive_split(graph, 0.2, seed=3)
        g.validate_split(out, bundle)

    def test_relabel_preserves_adjacency(self):
        rng = np.random.default_rng(2)
        graph = toy_graph(rng, 9, 7, p=0.5)
        out, _, user_perm, item_perm = g.make_inductive_split(graph, 0.3, seed=4)
        relabeled = {(int(user_perm[u]), int(item_perm[i]))
                     for u, i in graph.edges()}
        assert relabeled == set(out.edges())

    def test_degenerate_user_keeps_all_in_train(self):
        # one seen user with exactly 2 seen-seen edges
        graph = g.graph_from_edges("A", 2, 4, [(0, 0), (0, 1), (1, 0), (1, 1),
                                               (1, 2), (1, 3)])
        _, bundle, _, _ = g.make_inductive_split(graph, 0.0, seed=0)
        by_user = {}
        for u, i in bundle.train:
            by_user.setdefault(u, []).append(i)
        assert sorted(by_user[0]) == [0, 1]

    def test_rejects_bad_fractions(self):
        graph = g.graph_from_edges("A", 2, 2, [(0, 0)])
        with pytest.raises(ValueError):
            g.make_inductive_split(graph, unseen_frac=1.0)
        with pytest.raises(ValueError):
            g.make_inductive_split(graph, seen_split=(0.5, 0.2, 0.2))

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000), split_seed=st.integers(0, 100))
    def test_split_invariants_property(self, seed, split_seed):
        rng = np.random.default_rng(seed)
        graph = toy_graph(rng, 8, 8, p=0.45)
        if graph.n_edges == 0:
            return
        out, bundle, _, _ = g.make_inductive_split(graph, 0.25, seed=split_seed)
        g.validate_split(out, bundle)


class TestTemplates:
    def test_all_seen(self):
        graph = g.graph_from_edges("A", 5, 4, [(0, 0)], n_seen_users=5,
                                   n_seen_items=4)
        users, items = g.select_templates(graph, "all-seen")
        assert len(users) == 5 and len(items) == 4

    def test_top_degree_tiebreak(self):
        # degrees: user 2 -> 5, user 0 -> 5, user 1 -> 3
        edges = [(2, i) for i in range(5)] + [(0, i) for i in range(5)] \
            + [(1, i) for i in range(3)]
        graph = g.graph_from_edges("A", 3, 5, edges)
        users, _ = g.select_templates(graph, "top-degree", m=2)
        assert users == (0, 2)

    def test_top_degree_zero(self):
        graph = g.graph_from_edges("A", 3, 3, [(0, 0)])
        users, items = g.select_templates(graph, "top-degree", m=0)
        assert users == () and items == ()

    def test_top_degree_too_large(self):
        graph = g.graph_from_edges("A", 3, 3, [(0, 0)])
        with pytest.raises(ValueError):
            g.select_templates(graph, "top-degree", m=4)


class TestManifest:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(11)
        graph = toy_graph(rng, 8, 8, p=0.4, tag="B")
        out, bundle, _, _ = g.make_inductive_split(graph, 0.25, seed=7)
        path = tmp_path / "split.tsv"
        g.write_split_manifest(path, out, bundle, seed=7)
        graph2, bundle2, seed = g.read_split_manifest(path)
        assert seed == 7
        assert bundle2 == bundle
        assert graph2.n_seen_users == out.n_seen_users
        assert set(graph2.edges()) == set(out.edges())

    def test_rerun_byte_identical(self, tmp_path):
        rng = np.random.default_rng(12)
        graph = toy_graph(rng, 8, 8, p=0.4)
        p1, p2 = tmp_path / "a.tsv", tmp_path / "b.tsv"
        for path in (p1, p2):
            out, bundle, _, _ = g.make_inductive_split(graph, 0.25, seed=3)
            g.write_split_manifest(path, out, bundle, seed=3)
        assert p1.read_bytes() == p2.read_bytes()


class TestOverlapMap:
    def test_bijective_ok(self):
        g.OverlapMap(pairs=((0, 3), (1, 2)))

    def test_duplicate_rejected(self):
        with pytest.raises(ValueError):
            g.OverlapMap(pairs=((0, 3), (0, 2)))
