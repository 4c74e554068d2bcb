"""Entity vocabularies, weighted bipartite graphs, and labeled examples.

Users and items are tuples of static entity ids plus a per-example
dynamic vector; relationships between entity types arrive as any number
of nonnegatively weighted bipartite graphs.  Everything here is
immutable once built.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .autodiff import SparseMatrix, Tensor


@dataclass(frozen=True)
class EntityType:
    """One vocabulary of static entities with dense ids [0, size).

    `features` is an optional per-instance feature matrix; absent means
    one-hot (handled implicitly downstream, never materialized here).
    """

    name: str
    size: int
    features: Tensor | None = None

    def __post_init__(self):
        if self.size < 0:
            raise ValueError(f"entity type {self.name!r} has negative size")
        if self.features is not None and self.features.shape[0] != self.size:
            raise ValueError(
                f"feature rows ({self.features.shape[0]}) != vocabulary size ({self.size}) "
                f"for entity type {self.name!r}"
            )


class EntityCatalog:
    """Ordered collection of entity types with unique names."""

    def __init__(self, types):
        self._types = tuple(types)
        names = [t.name for t in self._types]
        if len(set(names)) != len(names):
            raise ValueError("entity type names must be unique")
        self._index = {t.name: i for i, t in enumerate(self._types)}

    def __iter__(self):
        return iter(self._types)

    def __len__(self):
        return len(self._types)

    def names(self) -> tuple:
        return tuple(t.name for t in self._types)

    def get(self, name: str) -> EntityType:
        return self._types[self._index[name]]

    def order(self, name: str) -> int:
        return self._index[name]

    def size(self, name: str) -> int:
        return self.get(name).size

    def __contains__(self, name):
        return name in self._index


@dataclass(frozen=True)
class BipartiteGraph:
    """Named weighted graph from one entity type to another.

    Stored directed exactly as given; symmetrization happens only when a
    propagation step needs the block form.
    """

    name: str
    source_type: str
    target_type: str
    adjacency: SparseMatrix

    def __post_init__(self):
        # Weight-sign and bounds problems are reported by validate(), not
        # rejected here, so diagnostics can name every offending edge.
        if self.source_type == self.target_type:
            raise ValueError(
                f"graph {self.name!r} links {self.source_type!r} to itself; "
                "same-type graphs are not supported"
            )


class GraphSet:
    """A catalog plus its graphs, grouped by unordered type pair.

    The canonical orientation of a pair follows catalog order; graphs
    stored in the opposite direction are transposed when aggregated.
    """

    def __init__(self, catalog: EntityCatalog, graphs):
        self.catalog = catalog
        self.graphs = tuple(graphs)
        names = [g.name for g in self.graphs]
        if len(set(names)) != len(names):
            raise ValueError("graph names must be unique")
        by_pair: dict[tuple, list] = {}
        for g in self.graphs:
            for t in (g.source_type, g.target_type):
                if t not in catalog:
                    raise ValueError(f"graph {g.name!r} references unknown entity type {t!r}")
            a, b = g.source_type, g.target_type
            if catalog.order(a) > catalog.order(b):
                a, b = b, a
            by_pair.setdefault((a, b), []).append(g)
        self._by_pair = by_pair

    def pairs(self) -> tuple:
        """Type pairs holding at least one graph, in catalog order."""
        return tuple(sorted(self._by_pair, key=lambda p: (self.catalog.order(p[0]), self.catalog.order(p[1]))))

    def graphs_for(self, pair) -> tuple:
        return tuple(self._by_pair.get(tuple(pair), ()))

    def get_graph(self, name: str) -> BipartiteGraph:
        for g in self.graphs:
            if g.name == name:
                return g
        raise KeyError(name)

    def digest(self) -> str:
        """Stable hash of the catalog and graph layout, for skew checks."""
        payload = {
            "types": [[t.name, t.size] for t in self.catalog],
            "graphs": [[g.name, g.source_type, g.target_type] for g in self.graphs],
        }
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class AggregatedAdjacency:
    """Union support of one pair's graphs with stacked per-graph weights.

    `weights[e, p]` is graph p's weight on support edge e (0 where graph
    p has no such edge).  Orientation is the canonical pair order.
    """

    pair: tuple
    n_rows: int
    n_cols: int
    row_idx: np.ndarray
    col_idx: np.ndarray
    weights: np.ndarray
    graph_names: tuple

    @property
    def nnz(self) -> int:
        return int(self.row_idx.size)

    @property
    def multiplicity(self) -> int:
        return int(self.weights.shape[1])

    def component(self, p: int) -> SparseMatrix:
        """Graph p restricted to its own support (zeros dropped)."""
        vals = self.weights[:, p]
        keep = vals != 0.0
        return SparseMatrix(self.n_rows, self.n_cols,
                            self.row_idx[keep], self.col_idx[keep], vals[keep])


def block_adjacency(graph: BipartiteGraph, catalog: EntityCatalog) -> SparseMatrix:
    """Symmetric block matrix over the pair's combined node set.

    Source nodes come first; the adjacency sits in the top-right block
    and its transpose in the bottom-left, with zero diagonal blocks.
    """
    na = catalog.size(graph.source_type)
    nb = catalog.size(graph.target_type)
    adj = graph.adjacency
    if adj.shape != (na, nb):
        raise ValueError(f"graph {graph.name!r} adjacency is {adj.shape}, catalog says {(na, nb)}")
    rows = np.concatenate([adj.row_idx, adj.col_idx + na])
    cols = np.concatenate([adj.col_idx + na, adj.row_idx])
    vals = np.concatenate([adj.values, adj.values])
    return SparseMatrix(na + nb, na + nb, rows, cols, vals)


def aggregate(gs: GraphSet, pair) -> AggregatedAdjacency:
    """Stack all of a pair's graphs onto the union of their supports."""
    pair = tuple(pair)
    graphs = gs.graphs_for(pair)
    if not graphs:
        raise KeyError(f"no graphs between {pair[0]!r} and {pair[1]!r}")
    n_rows = gs.catalog.size(pair[0])
    n_cols = gs.catalog.size(pair[1])
    oriented = []
    for g in graphs:
        adj = g.adjacency if g.source_type == pair[0] else g.adjacency.transpose()
        oriented.append(adj)
    keys = [adj.row_idx * max(n_cols, 1) + adj.col_idx for adj in oriented]
    support = np.unique(np.concatenate(keys)) if keys else np.zeros(0, dtype=np.int64)
    weights = np.zeros((support.size, len(graphs)))
    for p, adj in enumerate(oriented):
        weights[np.searchsorted(support, keys[p]), p] = adj.values
    row_idx = support // max(n_cols, 1)
    col_idx = support % max(n_cols, 1)
    for a in (row_idx, col_idx, weights):
        a.setflags(write=False)
    return AggregatedAdjacency(pair, n_rows, n_cols, row_idx, col_idx, weights,
                               tuple(g.name for g in graphs))


# ---------------------------------------------------------------------------
# labeled examples
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LabeledExample:
    """One (user, item, label) row.

    Entity ids are keyed by type name; the dynamic vectors are the
    per-example content embeddings (possibly zero-dimensional).
    """

    user_ids: tuple          # ((type, id), ...) in a fixed type order
    item_ids: tuple
    user_vec: tuple = ()
    item_vec: tuple = ()
    label: int = 0
    user_key: str = ""

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")


def _default_user_key(user_ids) -> str:
    return "|".join(f"{t}:{i}" for t, i in user_ids)


class Dataset:
    """Columnar view over labeled examples with uniform dynamic dims."""

    def __init__(self, examples, user_types=None, item_types=None):
        examples = list(examples)
        if examples:
            ut = tuple(t for t, _ in examples[0].user_ids)
            it = tuple(t for t, _ in examples[0].item_ids)
        else:
            ut, it = tuple(user_types or ()), tuple(item_types or ())
        if user_types is not None and tuple(user_types) != ut:
            raise ValueError("user_types disagrees with example layout")
        if item_types is not None and tuple(item_types) != it:
            raise ValueError("item_types disagrees with example layout")
        self.user_types = ut
        self.item_types = it
        d_user = len(examples[0].user_vec) if examples else 0
        d_item = len(examples[0].item_vec) if examples else 0
        n = len(examples)
        self.user_id_cols = {t: np.zeros(n, dtype=np.int64) for t in ut}
        self.item_id_cols = {t: np.zeros(n, dtype=np.int64) for t in it}
        self.user_vecs = np.zeros((n, d_user))
        self.item_vecs = np.zeros((n, d_item))
        self.labels = np.zeros(n, dtype=np.int64)
        self.user_keys: list[str] = []
        for i, ex in enumerate(examples):
            if tuple(t for t, _ in ex.user_ids) != ut or tuple(t for t, _ in ex.item_ids) != it:
                raise ValueError(f"example {i} has a different entity-type layout")
            if len(ex.user_vec) != d_user or len(ex.item_vec) != d_item:
                raise ValueError(f"example {i} has a different dynamic dimension")
            for t, eid in ex.user_ids:
                self.user_id_cols[t][i] = eid
            for t, eid in ex.item_ids:
                self.item_id_cols[t][i] = eid
            self.user_vecs[i] = ex.user_vec
            self.item_vecs[i] = ex.item_vec
            self.labels[i] = ex.label
            self.user_keys.append(ex.user_key or _default_user_key(ex.user_ids))
        self._examples = tuple(examples)

    def __len__(self):
        return len(self._examples)

    def __getitem__(self, i) -> LabeledExample:
        return self._examples[i]

    def examples(self) -> tuple:
        return self._examples

    @property
    def d_user(self) -> int:
        return self.user_vecs.shape[1]

    @property
    def d_item(self) -> int:
        return self.item_vecs.shape[1]

    def by_user(self) -> dict:
        """Example indices grouped by user key, in first-seen order."""
        groups: dict[str, list] = {}
        for i, key in enumerate(self.user_keys):
            groups.setdefault(key, []).append(i)
        return groups

    def subset(self, indices) -> "Dataset":
        return Dataset([self._examples[i] for i in indices],
                       user_types=self.user_types, item_types=self.item_types)


def one_hop_features(gs: GraphSet, example: LabeledExample) -> np.ndarray:
    """Flat feature row for content-filtering style scorers.

    One slot per graph that links a user-side type to an item-side type
    (graph-set order), holding the edge weight between this example's
    instances (0 when absent), followed by the user then item dynamic
    vectors.
    """
    user_ids = dict(example.user_ids)
    item_ids = dict(example.item_ids)
    feats = []
    for g in gs.graphs:
        if g.source_type in user_ids and g.target_type in item_ids:
            r, c = user_ids[g.source_type], item_ids[g.target_type]
        elif g.source_type in item_ids and g.target_type in user_ids:
            r, c = item_ids[g.source_type], user_ids[g.target_type]
        else:
            continue
        feats.append(float(g.adjacency.csr()[r, c]))
    return np.concatenate([np.asarray(feats), np.asarray(example.user_vec, dtype=np.float64),
                           np.asarray(example.item_vec, dtype=np.float64)])


def one_hop_matrix(gs: GraphSet, ds: Dataset) -> np.ndarray:
    """Vectorized one_hop_features over a whole dataset (row per example)."""
    cols = []
    for g in gs.graphs:
        if g.source_type in ds.user_types and g.target_type in ds.item_types:
            r = ds.user_id_cols[g.source_type]
            c = ds.item_id_cols[g.target_type]
        elif g.source_type in ds.item_types and g.target_type in ds.user_types:
            r = ds.item_id_cols[g.source_type]
            c = ds.user_id_cols[g.target_type]
        else:
            continue
        cols.append(np.asarray(g.adjacency.csr()[r, c]).ravel())
    edge_part = np.column_stack(cols) if cols else np.zeros((len(ds), 0))
    return np.concatenate([edge_part, ds.user_vecs, ds.item_vecs], axis=1)


def linking_graphs(gs: GraphSet, user_types, item_types) -> tuple:
    """Names of graphs that connect a user-side type to an item-side type."""
    ut, it = set(user_types), set(item_types)
    out = []
    for g in gs.graphs:
        if (g.source_type in ut and g.target_type in it) or (g.source_type in it and g.target_type in ut):
            out.append(g.name)
    return tuple(out)


def validate(gs: GraphSet, ds: Dataset) -> list:
    """Collect every consistency violation; an empty list means clean."""
    problems = []
    for g in gs.graphs:
        na = gs.catalog.size(g.source_type)
        nb = gs.catalog.size(g.target_type)
        if g.adjacency.shape != (na, nb):
            problems.append(f"graph {g.name!r}: adjacency {g.adjacency.shape} != catalog {(na, nb)}")
        neg = np.nonzero(g.adjacency.values < 0)[0]
        for e in neg:
            problems.append(
                f"graph {g.name!r}: negative weight at "
                f"({g.adjacency.row_idx[e]}, {g.adjacency.col_idx[e]})"
            )
    for t in list(ds.user_types) + list(ds.item_types):
        if t not in gs.catalog:
            problems.append(f"dataset entity type {t!r} missing from catalog")
    for i, ex in enumerate(ds.examples()):
        for t, eid in list(ex.user_ids) + list(ex.item_ids):
            if t in gs.catalog and not (0 <= eid < gs.catalog.size(t)):
                problems.append(f"example {i}: {t!r} id {eid} out of range")
        if ex.label not in (0, 1):
            problems.append(f"example {i}: label {ex.label!r} not binary")
    return problems
