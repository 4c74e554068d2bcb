"""Relevance model: per-pair entity embeddings fused with dynamic
content, scored by a two-hidden-layer MLP ending in a sigmoid.

The representation of either side is a fixed universal slot layout: for
every type pair carrying graphs, one sub-slot per member type.  A side
fills the sub-slots whose type it actually has and leaves exact zeros
elsewhere, so user and item vectors share one documented layout and the
scorer input width never depends on the example.

Three modes share the scorer: `medres` (graph-derived embeddings),
`collab` (free embedding tables of the same width), and `cof` (a
logistic scorer over one-hop edge features, no embeddings at all).
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Var
from .graphs import Dataset, GraphSet, aggregate, block_adjacency, linking_graphs, one_hop_matrix
from .layers import AlgcnBlock, EmbMergeLayer, FreeEmbeddingTable, GcnStack, normalize_adjacency

CHECKPOINT_VERSION = 1

MODES = ("medres", "collab", "cof")
EMBEDDERS = ("algcn", "gcn")


class CheckpointError(ValueError):
    """Corrupt container or catalog/model skew."""


@dataclass(frozen=True)
class ModelConfig:
    mode: str = "medres"
    embedder: str = "algcn"
    d_embed: int = 64          # convolution width per layer
    d_merge: int = 64          # fused per-pair slot width
    k_f: int = 2
    layers: int = 2
    mlp_hidden: tuple = (256, 128)
    normalize: bool = False    # degree-normalize plain-conv adjacencies
    scorer_bias: bool = True
    per_branch_weights: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.embedder not in EMBEDDERS:
            raise ValueError(f"embedder must be one of {EMBEDDERS}, got {self.embedder!r}")
        if len(self.mlp_hidden) != 2:
            raise ValueError("the scorer has exactly two hidden layers")
        object.__setattr__(self, "mlp_hidden", tuple(int(h) for h in self.mlp_hidden))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mlp_hidden"] = list(self.mlp_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["mlp_hidden"] = tuple(d.get("mlp_hidden", (256, 128)))
        return cls(**d)


class MedresModel:
    """Parameters plus the fixed slot layout over a graph set."""

    def __init__(self, gs: GraphSet, user_types, item_types, d_user: int, d_item: int,
                 config: ModelConfig, seed: int = 0):
        self.gs = gs
        self.config = config
        self.seed = int(seed)
        self.user_types = tuple(user_types)
        self.item_types = tuple(item_types)
        self.d_user = int(d_user)
        self.d_item = int(d_item)
        for t in self.user_types + self.item_types:
            if t not in gs.catalog:
                raise ValueError(f"dataset entity type {t!r} missing from catalog")

        self.pairs = gs.pairs()
        self.slots = tuple((pair, t) for pair in self.pairs for t in pair)
        self.store = ParameterStore()
        rng = np.random.default_rng(self.seed)

        self._aggregates = {}
        self._pair_features = {}
        self._algcn = {}
        self._gcn = {}
        self._merge = {}
        self._tables = {}
        self._cof_width = None

        if config.mode == "cof":
            self._cof_graphs = linking_graphs(gs, self.user_types, self.item_types)
            self._cof_width = len(self._cof_graphs) + self.d_user + self.d_item
            self.store.add("cof/w", ad.glorot_uniform(rng, self._cof_width, 1))
            self.store.add("cof/b", np.zeros(1), decay=False)
            return

        if config.mode == "medres":
            for pair in self.pairs:
                agg = aggregate(gs, pair)
                self._aggregates[pair] = agg
                feats, feat_dim = self._build_pair_features(pair)
                self._pair_features[pair] = feats
                prefix = f"pair:{pair[0]}~{pair[1]}"
                if config.embedder == "algcn":
                    block = AlgcnBlock(f"{prefix}/algcn", agg.multiplicity, feat_dim,
                                       [config.d_embed] * config.layers, k_f=config.k_f,
                                       per_branch_weights=config.per_branch_weights)
                    self._algcn[pair] = block.build(self.store, rng)
                    merge_in, n_in = block.out_width, 1
                else:
                    stacks = []
                    for g in gs.graphs_for(pair):
                        adj = block_adjacency(g, gs.catalog)
                        if config.normalize:
                            adj = normalize_adjacency(adj)
                        stack = GcnStack(f"{prefix}/graph:{g.name}/gcn", feat_dim,
                                         [config.d_embed] * config.layers)
                        stacks.append((g, adj, stack.build(self.store, rng)))
                    self._gcn[pair] = stacks
                    merge_in, n_in = config.d_embed, len(stacks)
                layer = EmbMergeLayer(f"{prefix}/merge", n_in, merge_in, config.d_merge)
                self._merge[pair] = layer.build(self.store, rng)
        else:  # collab
            involved = sorted({t for pair in self.pairs for t in pair},
                              key=gs.catalog.order)
            for t in involved:
                table = FreeEmbeddingTable(t, gs.catalog.size(t), config.d_merge)
                self._tables[t] = table.build(self.store, rng)

        self.phi_user_width = len(self.slots) * config.d_merge + self.d_user
        self.phi_item_width = len(self.slots) * config.d_merge + self.d_item
        in_dim = self.phi_user_width + self.phi_item_width
        h1, h2 = config.mlp_hidden
        self.store.add("scorer/m1", ad.glorot_uniform(rng, in_dim, h1))
        self.store.add("scorer/m2", ad.glorot_uniform(rng, h1, h2))
        self.store.add("scorer/m3", ad.glorot_uniform(rng, h2, 1))
        if config.scorer_bias:
            self.store.add("scorer/b1", np.zeros(h1), decay=False)
            self.store.add("scorer/b2", np.zeros(h2), decay=False)
            self.store.add("scorer/b3", np.zeros(1), decay=False)

    # -- construction helpers ------------------------------------------------

    def _build_pair_features(self, pair):
        """Block-diagonal feature matrix for a pair; None means one-hot."""
        ta = self.gs.catalog.get(pair[0])
        tb = self.gs.catalog.get(pair[1])
        na, nb = ta.size, tb.size
        if ta.features is None and tb.features is None:
            return None, na + nb
        fa = ta.features.data if ta.features is not None else np.eye(na)
        fb = tb.features.data if tb.features is not None else np.eye(nb)
        feat = np.zeros((na + nb, fa.shape[1] + fb.shape[1]))
        feat[:na, :fa.shape[1]] = fa
        feat[na:, fa.shape[1]:] = fb
        return feat, feat.shape[1]

    # -- forward -------------------------------------------------------------

    def _embed_slots(self, tape) -> dict:
        """Embedding matrix per (pair, type) sub-slot, once per tape."""
        out = {}
        for pair in self.pairs:
            na = self.gs.catalog.size(pair[0])
            nb = self.gs.catalog.size(pair[1])
            if self.config.mode == "collab":
                out[(pair, pair[0])] = tape.param(self.store, self._tables[pair[0]].param_name)
                out[(pair, pair[1])] = tape.param(self.store, self._tables[pair[1]].param_name)
                continue
            feats = self._pair_features[pair]
            fvar = None if feats is None else tape.constant(feats)
            if self.config.embedder == "algcn":
                z = self._algcn[pair].forward(tape, self._aggregates[pair], fvar, self.store)
                src_list, dst_list = [z], [z]
            else:
                src_list, dst_list = [], []
                for g, adj, stack in self._gcn[pair]:
                    z = stack.forward(tape, adj, fvar, self.store)
                    src_list.append(z)
                    dst_list.append(z)
            a_rows = np.arange(na, dtype=np.int64)
            b_rows = na + np.arange(nb, dtype=np.int64)
            za_list, zb_list = [], []
            for g_z in src_list:
                za_list.append(ad.gather_rows(g_z, a_rows))
            for g_z in dst_list:
                zb_list.append(ad.gather_rows(g_z, b_rows))
            za, zb = self._merge[pair].forward(tape, za_list, zb_list, self.store)
            out[(pair, pair[0])] = za
            out[(pair, pair[1])] = zb
        return out

    def _assemble(self, tape, slot_embeds, side: str, ds: Dataset, idx) -> Var:
        """Concatenated slot representation for one side of a batch."""
        types = self.user_types if side == "user" else self.item_types
        id_cols = ds.user_id_cols if side == "user" else ds.item_id_cols
        vecs = ds.user_vecs if side == "user" else ds.item_vecs
        n = idx.size
        parts = []
        for pair, t in self.slots:
            if t in types:
                parts.append(ad.gather_rows(slot_embeds[(pair, t)], id_cols[t][idx]))
            else:
                parts.append(tape.constant(np.zeros((n, self.config.d_merge))))
        parts.append(tape.constant(vecs[idx]))
        return ad.concat_cols(parts)

    def _scorer(self, tape, x: Var) -> Var:
        h = ad.matmul(x, tape.param(self.store, "scorer/m1"))
        if self.config.scorer_bias:
            h = ad.add_row(h, tape.param(self.store, "scorer/b1"))
        h = ad.matmul(ad.relu(h), tape.param(self.store, "scorer/m2"))
        if self.config.scorer_bias:
            h = ad.add_row(h, tape.param(self.store, "scorer/b2"))
        h = ad.matmul(ad.relu(h), tape.param(self.store, "scorer/m3"))
        if self.config.scorer_bias:
            h = ad.add_row(h, tape.param(self.store, "scorer/b3"))
        return ad.sigmoid(h)

    def forward_scores(self, tape, ds: Dataset, idx=None) -> Var:
        """Differentiable (n, 1) score column for the selected examples."""
        idx = np.arange(len(ds), dtype=np.int64) if idx is None else np.asarray(idx, dtype=np.int64)
        if self.config.mode == "cof":
            feats = one_hop_matrix(self.gs, ds)[idx]
            if feats.shape[1] != self._cof_width:
                raise ad.ShapeError(
                    f"one-hop feature width {feats.shape[1]} != model width {self._cof_width}")
            h = ad.matmul(tape.constant(feats), tape.param(self.store, "cof/w"))
            return ad.sigmoid(ad.add_row(h, tape.param(self.store, "cof/b")))
        slot_embeds = self._embed_slots(tape)
        phi_u = self._assemble(tape, slot_embeds, "user", ds, idx)
        phi_i = self._assemble(tape, slot_embeds, "item", ds, idx)
        return self._scorer(tape, ad.concat_cols([phi_u, phi_i]))

    def assemble_repr(self, side: str, ds: Dataset, index: int) -> np.ndarray:
        """The slot-layout vector for one example's side (no scoring)."""
        if self.config.mode == "cof":
            raise ValueError("the one-hop mode has no slot representation")
        tape = ad.Tape()
        phi = self._assemble(tape, self._embed_slots(tape), side, ds,
                             np.asarray([index], dtype=np.int64))
        return phi.value[0].copy()

    def score(self, ds: Dataset, index: int) -> float:
        tape = ad.Tape()
        return float(self.forward_scores(tape, ds, np.asarray([index])).value[0, 0])

    def batch_score(self, ds: Dataset) -> tuple:
        """Scores in dataset order plus the per-user index map."""
        tape = ad.Tape()
        scores = self.forward_scores(tape, ds).value.ravel().copy()
        return scores, ds.by_user()


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


def _encode_array(arr: np.ndarray) -> dict:
    return {
        "shape": list(arr.shape),
        "data": base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii"),
    }


def _decode_array(spec: dict) -> np.ndarray:
    arr = np.frombuffer(base64.b64decode(spec["data"]), dtype="<f8").astype(np.float64)
    return arr.reshape(spec["shape"])


def save_checkpoint(model: MedresModel, path) -> None:
    """Versioned JSON container; float64 payloads round-trip bit-exactly."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "catalog_digest": model.gs.digest(),
        "user_types": list(model.user_types),
        "item_types": list(model.item_types),
        "d_user": model.d_user,
        "d_item": model.d_item,
        "seed": model.seed,
        "params": {name: _encode_array(model.store.value(name)) for name in model.store.names()},
    }
    body = json.dumps(payload, sort_keys=True)
    digest = hashlib.sha256(body.encode()).hexdigest()
    with open(path, "w") as fh:
        json.dump({"sha256": digest, "payload": payload}, fh, sort_keys=True)


def load_checkpoint(path, gs: GraphSet) -> MedresModel:
    """Rebuild a model from a container, verifying integrity and catalog.

    Raises CheckpointError when the payload hash does not match (tamper
    or truncation) or when the graph set differs from the one the model
    was trained against.
    """
    with open(path) as fh:
        container = json.load(fh)
    payload = container.get("payload")
    if payload is None or "sha256" not in container:
        raise CheckpointError("not a checkpoint container")
    body = json.dumps(payload, sort_keys=True)
    if hashlib.sha256(body.encode()).hexdigest() != container["sha256"]:
        raise CheckpointError("checkpoint digest mismatch: payload was modified")
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('format_version')!r}")
    if payload["catalog_digest"] != gs.digest():
        raise CheckpointError("catalog digest mismatch: checkpoint was trained on a different graph set")
    model = MedresModel(
        gs,
        payload["user_types"],
        payload["item_types"],
        payload["d_user"],
        payload["d_item"],
        ModelConfig.from_dict(payload["config"]),
        seed=payload["seed"],
    )
    names = set(model.store.names())
    if names != set(payload["params"]):
        raise CheckpointError("parameter names do not match the rebuilt model")
    for name in model.store.names():
        model.store.set_value(name, _decode_array(payload["params"][name]))
    return model
