"""Dataset construction: citation-corpus pipeline, word vectors, file
formats, planted-cluster synthesis, and splits.

The citation pipeline reads the Aminer V1 plain-text corpus format
(`#*` title, `#@` authors, `#t` year, `#c` venue, `#index` id, `#%`
reference, blank line between records).  The "user" role is always the
first author of the citing paper; the "author" role admits any
authorship position.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import SparseMatrix
from .graphs import (BipartiteGraph, Dataset, EntityCatalog, EntityType, GraphSet,
                     LabeledExample)

log = logging.getLogger(__name__)


class IngestError(ValueError):
    """Malformed input file; the message names the file location."""


# ---------------------------------------------------------------------------
# citation corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CitationRecord:
    paper_id: str
    title_tokens: tuple
    authors: tuple
    venue: str
    year: int
    refs: tuple

    def __post_init__(self):
        if not self.paper_id:
            raise ValueError("record needs a paper id")


_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize_title(title: str) -> tuple:
    return tuple(_TOKEN_RE.findall(title.lower()))


def _split_names(raw: str) -> tuple:
    return tuple(n.strip() for n in re.split(r"[;,]", raw) if n.strip())


def parse_citation_corpus(path):
    """Parse a corpus file into records plus dangling-reference flags.

    Returns (records, dangling) where dangling lists (citing paper id,
    missing reference id).  Malformed lines raise with their number.
    """
    records = []
    current: dict = {}
    refs: list = []

    def flush(line_no):
        if not current and not refs:
            return
        if "id" not in current:
            raise IngestError(f"{path}:{line_no}: record without an #index line")
        year_raw = current.get("year", "")
        try:
            year = int(year_raw) if year_raw else 0
        except ValueError:
            raise IngestError(f"{path}:{line_no}: bad year {year_raw!r}") from None
        records.append(CitationRecord(
            paper_id=current["id"],
            title_tokens=tokenize_title(current.get("title", "")),
            authors=_split_names(current.get("authors", "")),
            venue=current.get("venue", "").strip(),
            year=year,
            refs=tuple(refs),
        ))
        current.clear()
        refs.clear()

    with open(path, encoding="utf-8", errors="replace") as fh:
        line_no = 0
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                flush(line_no)
                continue
            if line.startswith("#*"):
                current["title"] = line[2:].strip()
            elif line.startswith("#@"):
                current["authors"] = line[2:].strip()
            elif line.startswith("#t"):
                current["year"] = line[2:].strip()
            elif line.startswith("#c"):
                current["venue"] = line[2:].strip()
            elif line.startswith("#index"):
                current["id"] = line[6:].strip()
            elif line.startswith("#%"):
                ref = line[2:].strip()
                if ref:
                    refs.append(ref)
            elif line.startswith("#!"):
                pass  # abstract; unused
            elif line.startswith("#"):
                raise IngestError(f"{path}:{line_no}: unknown tag {line.split()[0]!r}")
            else:
                raise IngestError(f"{path}:{line_no}: expected a tagged line, got {line[:40]!r}")
        flush(line_no + 1)

    known = {r.paper_id for r in records}
    dangling = [(r.paper_id, ref) for r in records for ref in r.refs if ref not in known]
    return records, dangling


def write_citation_corpus(records, path) -> None:
    """Inverse of the parser, for fixtures and round-trip checks."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(f"#*{' '.join(r.title_tokens)}\n")
            fh.write(f"#@{';'.join(r.authors)}\n")
            fh.write(f"#t{r.year if r.year else ''}\n")
            fh.write(f"#c{r.venue}\n")
            fh.write(f"#index{r.paper_id}\n")
            for ref in r.refs:
                fh.write(f"#%{ref}\n")
            fh.write("\n")


@dataclass(frozen=True)
class YearWindow:
    """Inclusive year range."""

    start: int
    end: int

    def __post_init__(self):
        if self.start > self.end:
            raise ValueError(f"window {self.start}-{self.end} is empty")

    def __contains__(self, year: int) -> bool:
        return self.start <= year <= self.end

    def overlaps(self, other: "YearWindow") -> bool:
        return self.start <= other.end and other.start <= self.end

    @classmethod
    def parse(cls, text: str) -> "YearWindow":
        m = re.fullmatch(r"\s*(\d+)\s*-\s*(\d+)\s*", text)
        if not m:
            raise IngestError(f"bad year window {text!r}, want START-END")
        return cls(int(m.group(1)), int(m.group(2)))


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint year windows for the three splits."""

    train: YearWindow
    val: YearWindow
    test: YearWindow

    def __post_init__(self):
        pairs = [(self.train, self.val), (self.train, self.test), (self.val, self.test)]
        for a, b in pairs:
            if a.overlaps(b):
                raise ValueError("split windows must be disjoint")


@dataclass
class CitationVocab:
    """String-to-dense-id maps; dense ids appear everywhere downstream."""

    users: dict = field(default_factory=dict)
    authors: dict = field(default_factory=dict)
    conferences: dict = field(default_factory=dict)


CITATION_GRAPHS = (
    "user_published_conference",
    "user_cited_conference",
    "user_coauthor_author",
    "user_cited_author",
    "author_cited_user",
)


def build_citation_graphs(records, window: YearWindow):
    """The five interaction graphs counted from in-window records.

    Returns (GraphSet, CitationVocab).  Vocabularies: users are first
    authors of in-window papers, authors are any-position authors,
    conferences are in-window venues.
    """
    in_window = [r for r in records if r.year in window]
    by_id = {r.paper_id: r for r in in_window}
    vocab = CitationVocab()
    for r in in_window:
        if r.authors:
            vocab.users.setdefault(r.authors[0], len(vocab.users))
        for a in r.authors:
            vocab.authors.setdefault(a, len(vocab.authors))
        if r.venue:
            vocab.conferences.setdefault(r.venue, len(vocab.conferences))

    counts = {name: {} for name in CITATION_GRAPHS}

    def bump(graph, i, j):
        counts[graph][(i, j)] = counts[graph].get((i, j), 0) + 1

    for r in in_window:
        if not r.authors:
            continue
        u = vocab.users[r.authors[0]]
        if r.venue:
            bump("user_published_conference", u, vocab.conferences[r.venue])
        for other in r.authors[1:]:
            bump("user_coauthor_author", u, vocab.authors[other])
        for ref in r.refs:
            cited = by_id.get(ref)
            if cited is None:
                continue  # outside the window (or dangling): not counted
            if cited.venue:
                bump("user_cited_conference", u, vocab.conferences[cited.venue])
            for a in cited.authors:
                bump("user_cited_author", u, vocab.authors[a])
            if cited.authors:
                cited_user = cited.authors[0]
                for a in r.authors:
                    if a != cited_user:
                        bump("author_cited_user", vocab.authors[a], vocab.users[cited_user])

    catalog = EntityCatalog([
        EntityType("user", len(vocab.users)),
        EntityType("author", len(vocab.authors)),
        EntityType("conference", len(vocab.conferences)),
    ])

    def matrix(graph, rows, cols):
        entries = [(i, j, float(w)) for (i, j), w in sorted(counts[graph].items())]
        return SparseMatrix.from_entries(rows, cols, entries)

    nu, na, nc = len(vocab.users), len(vocab.authors), len(vocab.conferences)
    graphs = [
        BipartiteGraph("user_published_conference", "user", "conference",
                       matrix("user_published_conference", nu, nc)),
        BipartiteGraph("user_cited_conference", "user", "conference",
                       matrix("user_cited_conference", nu, nc)),
        BipartiteGraph("user_coauthor_author", "user", "author",
                       matrix("user_coauthor_author", nu, na)),
        BipartiteGraph("user_cited_author", "user", "author",
                       matrix("user_cited_author", nu, na)),
        BipartiteGraph("author_cited_user", "author", "user",
                       matrix("author_cited_user", na, nu)),
    ]
    return GraphSet(catalog, graphs), vocab


def embed_tokens(tokens, vectors: dict, dim: int) -> np.ndarray:
    """Unweighted mean of in-vocabulary token vectors; zeros otherwise."""
    hits = [vectors[t] for t in tokens if t in vectors]
    if not hits:
        return np.zeros(dim)
    return np.mean(hits, axis=0)


def generate_labeled_pairs(records, gs_vocab, window: YearWindow,
                           candidate_window: YearWindow | None = None,
                           vectors: dict | None = None, dim: int = 0,
                           sample_rate: float = 1.0, seed: int = 0) -> Dataset:
    """Positive and negative (user, item) rows from citation events.

    A citing paper in `window` yields one positive per (cited paper,
    author-of-cited-paper).  For every (user, author) pair with at least
    one positive, each paper of that author inside `candidate_window`
    (default: same as `window`) that the user never cited becomes a
    negative.  `sample_rate` keeps a seeded fraction of the rows.
    """
    gs, vocab = gs_vocab
    cand = candidate_window or window
    if vectors is None:
        vectors = {}
    by_id = {r.paper_id: r for r in records}
    positives = []
    cited_by_user: dict = {}
    authors_cited: dict = {}

    for r in records:
        if r.year not in window or not r.authors:
            continue
        user_name = r.authors[0]
        if user_name not in vocab.users:
            continue
        uid = vocab.users[user_name]
        zeta = embed_tokens(r.title_tokens, vectors, dim)
        for ref in r.refs:
            cited = by_id.get(ref)
            if cited is None or cited.year not in cand:
                continue
            if not cited.venue or cited.venue not in vocab.conferences:
                continue
            cid = vocab.conferences[cited.venue]
            nu_vec = embed_tokens(cited.title_tokens, vectors, dim)
            cited_by_user.setdefault(uid, set()).add(cited.paper_id)
            for a in cited.authors:
                if a not in vocab.authors:
                    continue
                aid = vocab.authors[a]
                authors_cited.setdefault((uid, aid), a)
                positives.append(LabeledExample(
                    user_ids=(("user", uid),),
                    item_ids=(("author", aid), ("conference", cid)),
                    user_vec=tuple(zeta), item_vec=tuple(nu_vec),
                    label=1, user_key=f"user:{uid}",
                ))

    papers_of: dict = {}
    for r in records:
        if r.year not in cand or not r.venue or r.venue not in vocab.conferences:
            continue
        for a in r.authors:
            if a in vocab.authors:
                papers_of.setdefault(a, []).append(r)

    negatives = []
    for (uid, aid), author_name in sorted(authors_cited.items()):
        cited = cited_by_user.get(uid, set())
        for q in papers_of.get(author_name, ()):
            if q.paper_id in cited:
                continue
            negatives.append(LabeledExample(
                user_ids=(("user", uid),),
                item_ids=(("author", aid), ("conference", vocab.conferences[q.venue])),
                user_vec=tuple(np.zeros(dim)),
                item_vec=tuple(embed_tokens(q.title_tokens, vectors, dim)),
                label=0, user_key=f"user:{uid}",
            ))

    rows = positives + negatives
    if sample_rate < 1.0:
        rng = np.random.default_rng(seed)
        keep = rng.random(len(rows)) < sample_rate
        rows = [ex for ex, k in zip(rows, keep) if k]
    return Dataset(rows, user_types=("user",), item_types=("author", "conference"))


def filter_min_examples(ds: Dataset, min_user: int = 20, min_author: int = 20,
                        author_type: str = "author") -> Dataset:
    """Drop users/authors with too few rows, to a fixed point.

    Removing a thin user can push an author under the bar and vice
    versa, so the pass repeats until nothing changes.  The result is
    independent of processing order.
    """
    keep = np.ones(len(ds), dtype=bool)
    has_author = author_type in ds.item_types
    while True:
        changed = False
        user_counts: dict = {}
        author_counts: dict = {}
        for i in np.nonzero(keep)[0]:
            user_counts[ds.user_keys[i]] = user_counts.get(ds.user_keys[i], 0) + 1
            if has_author:
                aid = int(ds.item_id_cols[author_type][i])
                author_counts[aid] = author_counts.get(aid, 0) + 1
        for i in np.nonzero(keep)[0]:
            if user_counts[ds.user_keys[i]] < min_user:
                keep[i] = False
                changed = True
            elif has_author and author_counts[int(ds.item_id_cols[author_type][i])] < min_author:
                keep[i] = False
                changed = True
        if not changed:
            return ds.subset(np.nonzero(keep)[0])


def restrict_to_seen(ds: Dataset, train: Dataset) -> Dataset:
    """Keep only rows whose every entity id occurred in the training set."""
    seen_user = {t: set(np.unique(train.user_id_cols[t])) for t in train.user_types}
    seen_item = {t: set(np.unique(train.item_id_cols[t])) for t in train.item_types}
    kept = []
    for i in range(len(ds)):
        ok = all(int(ds.user_id_cols[t][i]) in seen_user.get(t, set()) for t in ds.user_types)
        ok = ok and all(int(ds.item_id_cols[t][i]) in seen_item.get(t, set()) for t in ds.item_types)
        if ok:
            kept.append(i)
    return ds.subset(kept)


# ---------------------------------------------------------------------------
# word vectors
# ---------------------------------------------------------------------------


def load_word_vectors(path, dim: int) -> dict:
    """GloVe text format: token then `dim` floats per line.

    Wrong arity raises with the line number; a duplicate token warns and
    the last occurrence wins.
    """
    out: dict = {}
    with open(path, encoding="utf-8", errors="replace") as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            token, rest = parts[0], parts[1:]
            if len(rest) != dim:
                raise IngestError(f"{path}:{line_no}: expected {dim} floats, got {len(rest)}")
            try:
                vec = np.array([float(x) for x in rest])
            except ValueError:
                raise IngestError(f"{path}:{line_no}: non-numeric vector component") from None
            if token in out:
                log.warning("%s:%d: duplicate token %r, keeping the later entry",
                            path, line_no, token)
            out[token] = vec
    return out


# ---------------------------------------------------------------------------
# synthetic planted-cluster data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    users: int = 200
    items: int = 50
    clusters: int = 4
    n_graphs: int = 2
    d_user: int = 2
    d_item: int = 2
    p_same: float = 0.9
    p_cross: float = 0.05
    edge_p_same: float = 0.8
    edge_p_cross: float = 0.08
    train_items_per_user: int | None = None  # None: full cross product
    seed: int = 0

    def __post_init__(self):
        if self.users < 0 or self.items < 0:
            raise ValueError("entity counts must be nonnegative")
        if self.clusters < 1 or self.n_graphs < 1:
            raise ValueError("need at least one cluster and one graph")
        if self.train_items_per_user is not None and not (0 < self.train_items_per_user <= self.items):
            raise ValueError("train_items_per_user must be in 1..items")


def _synthesize_core(cfg: SyntheticConfig, n_label_draws: int):
    """Seeded clusters and graphs plus `n_label_draws` labeled datasets.

    Every draw covers the full user x item cross product with fresh
    Bernoulli labels and fresh dynamic noise vectors, so draws share the
    planted structure but none of the realized rows.
    """
    rng = np.random.default_rng(cfg.seed)
    user_cluster = rng.integers(0, cfg.clusters, size=cfg.users)
    item_cluster = rng.integers(0, cfg.clusters, size=cfg.items)
    catalog = EntityCatalog([
        EntityType("user", cfg.users),
        EntityType("item", cfg.items),
    ])
    same = user_cluster[:, None] == item_cluster[None, :]
    graphs = []
    for g in range(cfg.n_graphs):
        edge_p = np.where(same, cfg.edge_p_same, cfg.edge_p_cross)
        present = rng.random((cfg.users, cfg.items)) < edge_p
        weights = np.where(same, 1.0 + rng.poisson(4.0, size=same.shape),
                           1.0 + rng.poisson(0.5, size=same.shape))
        r, c = np.nonzero(present)
        graphs.append(BipartiteGraph(
            f"affinity_{g}", "user", "item",
            SparseMatrix(cfg.users, cfg.items, r, c, weights[r, c]),
        ))
    gs = GraphSet(catalog, graphs)

    label_p = np.where(same, cfg.p_same, cfg.p_cross)
    datasets = []
    for _ in range(n_label_draws):
        labels = (rng.random((cfg.users, cfg.items)) < label_p).astype(np.int64)
        user_vecs = rng.normal(0.0, 1.0, size=(cfg.users * cfg.items, cfg.d_user))
        item_vecs = rng.normal(0.0, 1.0, size=(cfg.users * cfg.items, cfg.d_item))
        examples = []
        row = 0
        for u in range(cfg.users):
            for i in range(cfg.items):
                examples.append(LabeledExample(
                    user_ids=(("user", u),), item_ids=(("item", i),),
                    user_vec=tuple(user_vecs[row]), item_vec=tuple(item_vecs[row]),
                    label=int(labels[u, i]), user_key=f"user:{u}",
                ))
                row += 1
        datasets.append(Dataset(examples, user_types=("user",), item_types=("item",)))
    return gs, datasets


def synthesize(cfg: SyntheticConfig):
    """Planted-cluster graphs plus one labeled cross-product dataset.

    Same-cluster (user, item) pairs are positive with probability
    `p_same`, cross-cluster with `p_cross`; graph edges are denser and
    heavier inside clusters, so the graphs carry the signal the labels
    follow.
    """
    gs, datasets = _synthesize_core(cfg, 1)
    return gs, datasets[0]


def synthesize_splits(cfg: SyntheticConfig):
    """(graphs, train, val, test) with independent label draws per split.

    Evaluation splits keep every user's full item slate so per-user
    negative counts stay comfortably above typical budgets; the train
    draw optionally keeps a seeded per-user item subset to emulate
    sparse engagement.
    """
    gs, datasets = _synthesize_core(cfg, 3)
    train = datasets[0]
    if cfg.train_items_per_user is not None:
        rng = np.random.default_rng(cfg.seed + 0x5EED)
        keep = []
        for u in range(cfg.users):
            items = rng.permutation(cfg.items)[: cfg.train_items_per_user]
            keep.extend(u * cfg.items + i for i in sorted(items))
        train = train.subset(keep)
    return gs, train, datasets[1], datasets[2]


def split_by_ratio(ds: Dataset, ratios=(0.7, 0.15, 0.15), seed: int = 0):
    """Seeded random row split into (train, val, test)."""
    if abs(sum(ratios) - 1.0) > 1e-9 or len(ratios) != 3:
        raise ValueError("ratios must be three numbers summing to 1")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ds))
    n_train = int(round(ratios[0] * len(ds)))
    n_val = int(round(ratios[1] * len(ds)))
    return (ds.subset(perm[:n_train]),
            ds.subset(perm[n_train:n_train + n_val]),
            ds.subset(perm[n_train + n_val:]))


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def write_graphs(gs: GraphSet, out_dir, manifest_name: str = "graphs.json"):
    """One TSV per graph (src, dst, weight) plus a JSON manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for g in gs.graphs:
        fname = f"graph_{g.name}.tsv"
        with open(out_dir / fname, "w") as fh:
            fh.write("src_id\tdst_id\tweight\n")
            for r, c, v in g.adjacency.entries():
                fh.write(f"{r}\t{c}\t{v:.10g}\n")
        entries.append({"name": g.name, "source_type": g.source_type,
                        "target_type": g.target_type, "path": fname})
    manifest = {
        "types": [{"name": t.name, "size": t.size} for t in gs.catalog],
        "graphs": entries,
    }
    path = out_dir / manifest_name
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def read_graphs(manifest_path) -> GraphSet:
    manifest_path = Path(manifest_path)
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    catalog = EntityCatalog([EntityType(t["name"], t["size"]) for t in manifest["types"]])
    graphs = []
    for entry in manifest["graphs"]:
        rows, cols, vals = [], [], []
        gpath = manifest_path.parent / entry["path"]
        with open(gpath) as fh:
            header = fh.readline()
            if header.strip() != "src_id\tdst_id\tweight":
                raise IngestError(f"{gpath}:1: bad header {header.strip()!r}")
            for line_no, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 3:
                    raise IngestError(f"{gpath}:{line_no}: expected 3 columns")
                try:
                    rows.append(int(parts[0]))
                    cols.append(int(parts[1]))
                    vals.append(float(parts[2]))
                except ValueError:
                    raise IngestError(f"{gpath}:{line_no}: bad numeric field") from None
        na = catalog.size(entry["source_type"])
        nb = catalog.size(entry["target_type"])
        graphs.append(BipartiteGraph(entry["name"], entry["source_type"], entry["target_type"],
                                     SparseMatrix(na, nb, rows, cols, vals)))
    return GraphSet(catalog, graphs)


def write_dataset(ds: Dataset, path) -> None:
    """JSON-lines, one labeled example per line."""
    with open(path, "w") as fh:
        for ex in ds.examples():
            fh.write(json.dumps({
                "user": {t: int(i) for t, i in ex.user_ids},
                "item": {t: int(i) for t, i in ex.item_ids},
                "user_vec": list(ex.user_vec),
                "item_vec": list(ex.item_vec),
                "label": int(ex.label),
                "user_key": ex.user_key or None,
            }) + "\n")


def read_dataset(path) -> Dataset:
    examples = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise IngestError(f"{path}:{line_no}: bad JSON ({e.msg})") from None
            for key in ("user", "item", "label"):
                if key not in row:
                    raise IngestError(f"{path}:{line_no}: missing field {key!r}")
            if row["label"] not in (0, 1):
                raise IngestError(f"{path}:{line_no}: label must be 0 or 1")
            examples.append(LabeledExample(
                user_ids=tuple((t, int(i)) for t, i in row["user"].items()),
                item_ids=tuple((t, int(i)) for t, i in row["item"].items()),
                user_vec=tuple(row.get("user_vec", ())),
                item_vec=tuple(row.get("item_vec", ())),
                label=int(row["label"]),
                user_key=row.get("user_key") or "",
            ))
    return Dataset(examples)
