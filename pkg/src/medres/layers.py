"""Graph embedding blocks: plain graph convolutions, convolutions with
learnable entrywise adjacency transforms, per-pair fusion layers, and
free embedding tables for the graph-free variant.

A transform squashes the stacked multi-graph edge weights through a
logistic curve, entry by entry, only on the union support: an absent
edge stays an exact structural zero instead of becoming sigmoid(beta).
Branch outputs use ReLU throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import SparseMatrix, SparseVar, Var
from .graphs import AggregatedAdjacency


def residual_concat(layer_outputs) -> Var:
    """Column-concatenate every layer's output, in layer order."""
    outputs = list(layer_outputs)
    if len(outputs) == 1:
        return outputs[0]
    return ad.concat_cols(outputs)


def gcn_layer(tape, adjacency: SparseMatrix, x: Var | None, w: Var) -> Var:
    """ReLU(A X W).  `x=None` stands for one-hot features, so A X W = A W."""
    h = w if x is None else ad.matmul(x, w)
    return ad.relu(ad.spmm(adjacency, h))


def normalize_adjacency(a: SparseMatrix) -> SparseMatrix:
    """Symmetric degree normalization D^-1/2 (A + I) D^-1/2."""
    if a.rows != a.cols:
        raise ValueError("degree normalization needs a square matrix")
    n = a.rows
    rows = np.concatenate([a.row_idx, np.arange(n, dtype=np.int64)])
    cols = np.concatenate([a.col_idx, np.arange(n, dtype=np.int64)])
    vals = np.concatenate([a.values, np.ones(n)])
    key = rows * n + cols
    uniq, inverse = np.unique(key, return_inverse=True)
    summed = np.zeros(uniq.size)
    np.add.at(summed, inverse, vals)
    r, c = uniq // n, uniq % n
    deg = np.zeros(n)
    np.add.at(deg, r, summed)
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.maximum(deg, 1e-300)), 0.0)
    return SparseMatrix(n, n, r, c, summed * inv_sqrt[r] * inv_sqrt[c])


@dataclass(frozen=True)
class AdjacencyTransform:
    """Learnable logistic reweighting of one pair's stacked edge weights."""

    alpha_name: str
    beta_name: str
    multiplicity: int

    @classmethod
    def create(cls, store: ad.ParameterStore, prefix: str, multiplicity: int) -> "AdjacencyTransform":
        alpha_name = f"{prefix}/alpha"
        beta_name = f"{prefix}/beta"
        store.add(alpha_name, np.ones((multiplicity, 1)), decay=False)
        store.add(beta_name, np.zeros(1), decay=False)
        return cls(alpha_name, beta_name, multiplicity)


def transform_adjacency(tape, agg: AggregatedAdjacency, transform: AdjacencyTransform,
                        store: ad.ParameterStore) -> SparseVar:
    """sigmoid(alpha . stacked_weights + beta) on the union support only.

    Off-support entries remain exactly zero; gradients reach alpha and
    beta through the recorded affine + sigmoid chain.
    """
    if store.value(transform.alpha_name).shape != (agg.multiplicity, 1):
        raise ad.ShapeError(
            f"transform expects multiplicity {store.value(transform.alpha_name).shape[0]}, "
            f"aggregate has {agg.multiplicity}"
        )
    alpha = tape.param(store, transform.alpha_name)
    beta = tape.param(store, transform.beta_name)
    stacked = tape.constant(agg.weights)
    values = ad.sigmoid(ad.add_row(ad.matmul(stacked, alpha), beta))
    return SparseVar(agg.n_rows, agg.n_cols, agg.row_idx, agg.col_idx, values)


def block_sparse_var(rect: SparseVar) -> SparseVar:
    """Symmetric block form of a rectangular sparse variable.

    Row nodes first, then column nodes; each edge value appears twice
    (once per direction) so gradients accumulate from both copies.
    """
    na, nb = rect.rows, rect.cols
    rows = np.concatenate([rect.row_idx, rect.col_idx + na])
    cols = np.concatenate([rect.col_idx + na, rect.row_idx])
    values = ad.concat_rows([rect.values, rect.values])
    return SparseVar(na + nb, na + nb, rows, cols, values)


def algcn_layer(tape, agg: AggregatedAdjacency, x: Var | None, w: Var,
                transforms, store: ad.ParameterStore) -> Var:
    """One multi-branch propagation step over the learned adjacencies.

    Every branch shares the layer weight (unless the caller passes a
    per-branch list of weights); outputs are column-concatenated, so the
    result is k_f times the weight's output width.
    """
    transforms = list(transforms)
    if not transforms:
        raise ValueError("need at least one adjacency transform")
    weights = w if isinstance(w, list) else [w] * len(transforms)
    if len(weights) != len(transforms):
        raise ad.ShapeError("per-branch weights must match transform count")
    branches = []
    for t, w_p in zip(transforms, weights):
        block = block_sparse_var(transform_adjacency(tape, agg, t, store))
        h = w_p if x is None else ad.matmul(x, w_p)
        branches.append(ad.relu(ad.spmm_dyn(block, h)))
    return branches[0] if len(branches) == 1 else ad.concat_cols(branches)


class AlgcnBlock:
    """A stack of adjacency-learned convolution layers for one type pair.

    Layer l maps k_f * width(l-1) columns (the raw feature width for the
    first layer) through a shared weight to `widths[l]` columns per
    branch; the block output concatenates every layer's output.
    """

    def __init__(self, prefix: str, multiplicity: int, feat_dim: int, widths,
                 k_f: int = 2, per_branch_weights: bool = False):
        if k_f < 1 or k_f > 8:
            raise ValueError("k_f must be in 1..8")
        self.prefix = prefix
        self.multiplicity = multiplicity
        self.feat_dim = feat_dim
        self.widths = tuple(widths)
        self.k_f = k_f
        self.per_branch_weights = per_branch_weights
        self.weight_names: list = []
        self.transforms: list = []

    @property
    def out_width(self) -> int:
        return sum(self.k_f * w for w in self.widths)

    def build(self, store: ad.ParameterStore, rng: np.random.Generator) -> "AlgcnBlock":
        in_dim = self.feat_dim
        for l, width in enumerate(self.widths):
            if self.per_branch_weights:
                names = []
                for p in range(self.k_f):
                    name = f"{self.prefix}/l{l}/b{p}/w"
                    store.add(name, ad.glorot_uniform(rng, in_dim, width))
                    names.append(name)
                self.weight_names.append(names)
            else:
                name = f"{self.prefix}/l{l}/w"
                store.add(name, ad.glorot_uniform(rng, in_dim, width))
                self.weight_names.append(name)
            self.transforms.append([
                AdjacencyTransform.create(store, f"{self.prefix}/l{l}/b{p}", self.multiplicity)
                for p in range(self.k_f)
            ])
            in_dim = self.k_f * width
        return self

    def forward(self, tape, agg: AggregatedAdjacency, features: Var | None,
                store: ad.ParameterStore) -> Var:
        x = features
        outputs = []
        for l in range(len(self.widths)):
            wn = self.weight_names[l]
            w = [tape.param(store, n) for n in wn] if isinstance(wn, list) else tape.param(store, wn)
            x = algcn_layer(tape, agg, x, w, self.transforms[l], store)
            outputs.append(x)
        return residual_concat(outputs)


class GcnStack:
    """Plain convolution stack over one constant adjacency; the embedding
    is the last layer's output (no residual concatenation here)."""

    def __init__(self, prefix: str, feat_dim: int, widths):
        self.prefix = prefix
        self.feat_dim = feat_dim
        self.widths = tuple(widths)
        self.weight_names: list = []

    @property
    def out_width(self) -> int:
        return self.widths[-1]

    def build(self, store: ad.ParameterStore, rng: np.random.Generator) -> "GcnStack":
        in_dim = self.feat_dim
        for l, width in enumerate(self.widths):
            name = f"{self.prefix}/l{l}/w"
            store.add(name, ad.glorot_uniform(rng, in_dim, width))
            self.weight_names.append(name)
            in_dim = width
        return self

    def forward(self, tape, adjacency: SparseMatrix, features: Var | None,
                store: ad.ParameterStore) -> Var:
        x = features
        for name in self.weight_names:
            x = gcn_layer(tape, adjacency, x, tape.param(store, name))
        return x


def emb_merge(tape, src_embeddings, dst_embeddings, w_src: Var, w_dst: Var,
              c_src: Var, c_dst: Var) -> tuple:
    """Fuse per-graph embeddings into one vector per node, side by side.

    Source rows and target rows get their own fully connected weights;
    both go through ReLU.  Returns (source rows, target rows).
    """
    src = ad.concat_cols(list(src_embeddings)) if len(list(src_embeddings)) > 1 else list(src_embeddings)[0]
    dst_list = list(dst_embeddings)
    dst = ad.concat_cols(dst_list) if len(dst_list) > 1 else dst_list[0]
    out_src = ad.relu(ad.add_row(ad.matmul(src, w_src), c_src))
    out_dst = ad.relu(ad.add_row(ad.matmul(dst, w_dst), c_dst))
    return out_src, out_dst


class EmbMergeLayer:
    """Per-pair fusion weights: (n_inputs * d_in) -> d_out on each side."""

    def __init__(self, prefix: str, n_inputs: int, d_in: int, d_out: int):
        self.prefix = prefix
        self.n_inputs = n_inputs
        self.d_in = d_in
        self.d_out = d_out

    def build(self, store: ad.ParameterStore, rng: np.random.Generator) -> "EmbMergeLayer":
        fan_in = self.n_inputs * self.d_in
        store.add(f"{self.prefix}/w_src", ad.glorot_uniform(rng, fan_in, self.d_out))
        store.add(f"{self.prefix}/w_dst", ad.glorot_uniform(rng, fan_in, self.d_out))
        store.add(f"{self.prefix}/c_src", np.zeros(self.d_out), decay=False)
        store.add(f"{self.prefix}/c_dst", np.zeros(self.d_out), decay=False)
        return self

    def forward(self, tape, src_embeddings, dst_embeddings, store: ad.ParameterStore) -> tuple:
        return emb_merge(
            tape, src_embeddings, dst_embeddings,
            tape.param(store, f"{self.prefix}/w_src"),
            tape.param(store, f"{self.prefix}/w_dst"),
            tape.param(store, f"{self.prefix}/c_src"),
            tape.param(store, f"{self.prefix}/c_dst"),
        )


class FreeEmbeddingTable:
    """Learnable row per entity instance, for the graph-free variant."""

    def __init__(self, entity_type: str, size: int, dim: int):
        self.entity_type = entity_type
        self.size = size
        self.dim = dim
        self.param_name = f"free/{entity_type}"

    def build(self, store: ad.ParameterStore, rng: np.random.Generator) -> "FreeEmbeddingTable":
        store.add(self.param_name, rng.normal(0.0, 0.1, size=(self.size, self.dim)), decay=False)
        return self


def free_lookup(tape, store: ad.ParameterStore, table: FreeEmbeddingTable, ids) -> Var:
    """Gather table rows; the backward pass touches only the looked-up rows."""
    return ad.gather_rows(tape.param(store, table.param_name), ids)
