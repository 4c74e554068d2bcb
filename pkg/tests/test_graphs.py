"""Entity catalogs, bipartite graphs, aggregation, and examples."""

import numpy as np
import pytest

from medres.autodiff import SparseMatrix, Tensor
from medres.graphs import (BipartiteGraph, Dataset, EntityCatalog,
                           EntityType, GraphSet, LabeledExample, aggregate,
                           block_adjacency, one_hop_features, one_hop_matrix, validate)


def catalog(**sizes):
    return EntityCatalog([EntityType(n, s) for n, s in sizes.items()])


def graph(name, src, dst, entries, cat):
    adj = SparseMatrix.from_entries(cat.size(src), cat.size(dst), entries)
    return BipartiteGraph(name, src, dst, adj)


class TestCatalog:
    def test_duplicate_type_names_rejected(self):
        with pytest.raises(ValueError):
            EntityCatalog([EntityType("a", 1), EntityType("a", 2)])

    def test_feature_row_count_checked(self):
        with pytest.raises(ValueError):
            EntityType("a", 3, features=Tensor(np.zeros((2, 4))))

    def test_order_follows_construction(self):
        cat = catalog(user=2, item=3, tag=1)
        assert cat.names() == ("user", "item", "tag")
        assert cat.order("tag") == 2


class TestGraphSet:
    def test_same_type_graph_rejected(self):
        cat = catalog(user=2)
        with pytest.raises(ValueError, match="itself"):
            BipartiteGraph("loop", "user", "user", SparseMatrix.empty(2, 2))

    def test_unknown_type_rejected(self):
        cat = catalog(user=2, item=2)
        g = graph("g", "user", "item", [], cat)
        with pytest.raises(ValueError, match="unknown"):
            GraphSet(catalog(user=2), [g])

    def test_duplicate_graph_names_rejected(self):
        cat = catalog(user=2, item=2)
        gs = [graph("g", "user", "item", [], cat), graph("g", "item", "user", [], cat)]
        with pytest.raises(ValueError, match="unique"):
            GraphSet(cat, gs)

    def test_pairs_canonical_order(self):
        cat = catalog(user=2, item=2, tag=2)
        gs = GraphSet(cat, [graph("b", "tag", "user", [], cat),
                            graph("a", "user", "item", [], cat)])
        assert gs.pairs() == (("user", "item"), ("user", "tag"))

    def test_digest_tracks_layout(self):
        cat = catalog(user=2, item=2)
        g1 = GraphSet(cat, [graph("g", "user", "item", [], cat)])
        g2 = GraphSet(cat, [graph("h", "user", "item", [], cat)])
        assert g1.digest() != g2.digest()
        assert g1.digest() == GraphSet(cat, [graph("g", "user", "item", [], cat)]).digest()


class TestBlockAdjacency:
    def test_empty_graph(self):
        cat = catalog(a=2, b=3)
        blk = block_adjacency(graph("g", "a", "b", [], cat), cat)
        assert blk.shape == (5, 5)
        assert blk.nnz == 0

    def test_single_edge_layout(self):
        cat = catalog(a=1, b=2)
        blk = block_adjacency(graph("g", "a", "b", [(0, 1, 2.0)], cat), cat)
        assert blk.entries() == [(0, 2, 2.0), (2, 0, 2.0)]

    def test_symmetric_no_diagonal_blocks_randomized(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            na, nb = rng.integers(1, 6, size=2)
            nnz = int(rng.integers(0, na * nb + 1))
            flat = rng.choice(na * nb, size=nnz, replace=False)
            cat = catalog(a=int(na), b=int(nb))
            g = graph("g", "a", "b",
                      [(int(f // nb), int(f % nb), float(w))
                       for f, w in zip(flat, rng.uniform(0.1, 5, nnz))], cat)
            blk = block_adjacency(g, cat).densify().data
            np.testing.assert_array_equal(blk, blk.T)
            assert np.all(blk[:na, :na] == 0)
            assert np.all(blk[na:, na:] == 0)


class TestAggregate:
    def test_single_graph(self):
        cat = catalog(a=2, b=2)
        gs = GraphSet(cat, [graph("g", "a", "b", [(0, 0, 1.0), (1, 1, 4.0)], cat)])
        agg = aggregate(gs, ("a", "b"))
        assert agg.multiplicity == 1
        np.testing.assert_array_equal(agg.weights.ravel(), [1.0, 4.0])

    def test_union_by_hand(self):
        cat = catalog(a=1, b=2)
        gs = GraphSet(cat, [
            graph("g1", "a", "b", [(0, 0, 1.0)], cat),
            graph("g2", "a", "b", [(0, 1, 3.0)], cat),
        ])
        agg = aggregate(gs, ("a", "b"))
        assert agg.nnz == 2
        assert agg.row_idx.tolist() == [0, 0]
        assert agg.col_idx.tolist() == [0, 1]
        np.testing.assert_array_equal(agg.weights, [[1.0, 0.0], [0.0, 3.0]])

    def test_disjoint_supports_sum_sizes(self):
        cat = catalog(a=3, b=3)
        gs = GraphSet(cat, [
            graph("g1", "a", "b", [(0, 0, 1.0), (1, 1, 1.0)], cat),
            graph("g2", "a", "b", [(2, 2, 1.0)], cat),
        ])
        assert aggregate(gs, ("a", "b")).nnz == 3

    def test_reversed_graph_is_transposed(self):
        cat = catalog(a=2, b=2)
        gs = GraphSet(cat, [
            graph("fwd", "a", "b", [(0, 1, 1.0)], cat),
            graph("rev", "b", "a", [(1, 0, 7.0)], cat),  # same (a=0, b=1) edge
        ])
        agg = aggregate(gs, ("a", "b"))
        assert agg.nnz == 1
        np.testing.assert_array_equal(agg.weights, [[1.0, 7.0]])

    def test_component_projection_reproduces_graph(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            na, nb = (int(x) for x in rng.integers(1, 6, size=2))
            cat = catalog(a=na, b=nb)
            gs_graphs = []
            for gi in range(int(rng.integers(1, 4))):
                nnz = int(rng.integers(0, na * nb + 1))
                flat = rng.choice(na * nb, size=nnz, replace=False)
                gs_graphs.append(graph(
                    f"g{gi}", "a", "b",
                    [(int(f // nb), int(f % nb), float(w))
                     for f, w in zip(flat, rng.uniform(0.1, 3, nnz))], cat))
            gs = GraphSet(cat, gs_graphs)
            agg = aggregate(gs, ("a", "b"))
            for p, g in enumerate(gs_graphs):
                np.testing.assert_array_equal(agg.component(p).densify().data,
                                              g.adjacency.densify().data)

    def test_unknown_pair_errors(self):
        cat = catalog(a=1, b=1, c=1)
        gs = GraphSet(cat, [graph("g", "a", "b", [], cat)])
        with pytest.raises(KeyError):
            aggregate(gs, ("a", "c"))


def _toy_example(uv=(0.5,), iv=(1.5, -1.0)):
    return LabeledExample(user_ids=(("user", 0),), item_ids=(("item", 1),),
                          user_vec=uv, item_vec=iv, label=1)


class TestOneHop:
    def _gs(self):
        cat = catalog(user=2, item=3)
        return GraphSet(cat, [graph("g", "user", "item", [(0, 1, 5.0)], cat)])

    def test_edge_weight_leads(self):
        feats = one_hop_features(self._gs(), _toy_example())
        np.testing.assert_array_equal(feats, [5.0, 0.5, 1.5, -1.0])

    def test_missing_edge_gives_zero(self):
        ex = LabeledExample(user_ids=(("user", 1),), item_ids=(("item", 0),),
                            user_vec=(0.5,), item_vec=(1.5, -1.0), label=0)
        feats = one_hop_features(self._gs(), ex)
        np.testing.assert_array_equal(feats, [0.0, 0.5, 1.5, -1.0])

    def test_no_linking_graphs(self):
        cat = catalog(user=2, item=3, tag=2)
        gs = GraphSet(cat, [graph("g", "user", "tag", [(0, 0, 2.0)], cat)])
        feats = one_hop_features(gs, _toy_example())
        np.testing.assert_array_equal(feats, [0.5, 1.5, -1.0])

    def test_length_constant_across_dataset(self):
        gs = self._gs()
        examples = [
            LabeledExample(user_ids=(("user", u),), item_ids=(("item", i),),
                           user_vec=(0.1,), item_vec=(0.2, 0.3), label=(u + i) % 2)
            for u in range(2) for i in range(3)
        ]
        ds = Dataset(examples)
        widths = {one_hop_features(gs, ex).size for ex in examples}
        assert widths == {1 + 1 + 2}
        mat = one_hop_matrix(gs, ds)
        assert mat.shape == (6, 4)
        for i, ex in enumerate(examples):
            np.testing.assert_array_equal(mat[i], one_hop_features(gs, ex))


class TestDataset:
    def test_uniform_dynamic_dims_enforced(self):
        good = _toy_example()
        bad = LabeledExample(user_ids=(("user", 1),), item_ids=(("item", 0),),
                             user_vec=(0.5, 0.5), item_vec=(1.5, -1.0), label=0)
        with pytest.raises(ValueError, match="dynamic"):
            Dataset([good, bad])

    def test_label_must_be_binary(self):
        with pytest.raises(ValueError):
            LabeledExample(user_ids=(("user", 0),), item_ids=(("item", 0),), label=2)

    def test_user_key_defaults_to_id_tuple(self):
        ds = Dataset([_toy_example()])
        assert ds.user_keys == ["user:0"]

    def test_by_user_groups_in_first_seen_order(self):
        rows = [
            LabeledExample(user_ids=(("user", 1),), item_ids=(("item", 0),), label=0),
            LabeledExample(user_ids=(("user", 0),), item_ids=(("item", 1),), label=1),
            LabeledExample(user_ids=(("user", 1),), item_ids=(("item", 2),), label=1),
        ]
        groups = Dataset(rows).by_user()
        assert list(groups) == ["user:1", "user:0"]
        assert groups["user:1"] == [0, 2]


class TestValidate:
    def test_consistent_fixture_is_clean(self):
        cat = catalog(user=2, item=3)
        gs = GraphSet(cat, [graph("g", "user", "item", [(0, 1, 5.0)], cat)])
        ds = Dataset([_toy_example()])
        assert validate(gs, ds) == []

    def test_out_of_range_id_reported_with_index(self):
        cat = catalog(user=2, item=3)
        gs = GraphSet(cat, [graph("g", "user", "item", [], cat)])
        ds = Dataset([
            _toy_example(),
            LabeledExample(user_ids=(("user", 9),), item_ids=(("item", 0),),
                           user_vec=(0.5,), item_vec=(1.5, -1.0), label=0),
        ])
        problems = validate(gs, ds)
        assert len(problems) == 1
        assert "example 1" in problems[0] and "9" in problems[0]

    def test_negative_weight_reported_with_location(self):
        cat = catalog(user=2, item=3)
        gs = GraphSet(cat, [graph("g", "user", "item", [(1, 2, -4.0)], cat)])
        problems = validate(gs, Dataset([_toy_example()]))
        assert len(problems) == 1
        assert "'g'" in problems[0] and "(1, 2)" in problems[0]
