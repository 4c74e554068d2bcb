"""Operator CLI: prepare datasets, train, evaluate, and score.

Subcommands share `--config PATH --seed N --out DIR`; every output
lands under --out with stable filenames.  Exit codes are scriptable:
2 config problem, 3 data problem, 4 training divergence, 5 checkpoint
digest or catalog mismatch.

Seed precedence: --seed beats MEDRES_SEED beats the config file.
Relative paths in the config resolve against the config file's
directory.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
from pathlib import Path


from . import figures, ingest, metrics as metrics_mod, training
from .graphs import Dataset, GraphSet
from .ingest import IngestError, SyntheticConfig, YearWindow
from .model import CheckpointError, MedresModel, ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, TrainingDiverged

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_DIGEST = 5


class ConfigError(ValueError):
    pass


class RunConfig:
    """Validated view over the INI config with defaults filled in."""

    def __init__(self, parser: configparser.ConfigParser, base_dir: Path, seed_override=None):
        self.parser = parser
        self.base_dir = base_dir
        env_seed = os.environ.get("MEDRES_SEED")
        if seed_override is not None:
            self.seed = int(seed_override)
        elif env_seed is not None:
            try:
                self.seed = int(env_seed)
            except ValueError:
                raise ConfigError(f"MEDRES_SEED must be an integer, got {env_seed!r}") from None
        else:
            self.seed = self._getint("run", "seed", 0)

    # -- typed getters --------------------------------------------------

    def _get(self, section, key, default=None):
        if self.parser.has_option(section, key):
            raw = self.parser.get(section, key).strip()
            if raw:
                return raw
        if default is None:
            raise ConfigError(f"missing config key [{section}] {key}")
        return default

    def _optional(self, section, key):
        if self.parser.has_option(section, key):
            raw = self.parser.get(section, key).strip()
            return raw or None
        return None

    def _getint(self, section, key, default):
        raw = self._get(section, key, str(default))
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key} must be an integer, got {raw!r}") from None

    def _getfloat(self, section, key, default):
        raw = self._get(section, key, str(default))
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key} must be a number, got {raw!r}") from None

    def _getbool(self, section, key, default):
        raw = self._get(section, key, str(default)).lower()
        if raw in ("1", "true", "yes", "on"):
            return True
        if raw in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"[{section}] {key} must be a boolean, got {raw!r}")

    def path(self, key, must_exist=False) -> Path:
        raw = self._get("paths", key)
        p = Path(raw)
        if not p.is_absolute():
            p = self.base_dir / p
        if must_exist and not p.exists():
            raise ConfigError(f"path for [paths] {key} does not exist: {p}")
        return p

    # -- sections ---------------------------------------------------------

    def model_config(self) -> ModelConfig:
        hidden = self._get("model", "mlp_hidden", "256,128")
        try:
            mlp_hidden = tuple(int(x) for x in hidden.split(","))
        except ValueError:
            raise ConfigError(f"[model] mlp_hidden must be two integers, got {hidden!r}") from None
        try:
            return ModelConfig(
                mode=self._get("model", "mode", "medres"),
                embedder=self._get("model", "embedder", "algcn"),
                d_embed=self._getint("model", "d_embed", 64),
                d_merge=self._getint("model", "d_merge", 64),
                k_f=self._getint("model", "k_f", 2),
                layers=self._getint("model", "layers", 2),
                mlp_hidden=mlp_hidden,
                normalize=self._getbool("model", "normalize", False),
                scorer_bias=self._getbool("model", "scorer_bias", True),
                per_branch_weights=self._getbool("model", "per_branch_weights", False),
            )
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(
                k=self._getint("train", "k", 10),
                outer_iterations=self._getint("train", "outer_iterations", 5),
                inner_epochs=self._getint("train", "inner_epochs", 3),
                batch_size=self._getint("train", "batch_size", 1024),
                learning_rate=self._getfloat("train", "learning_rate", 1e-3),
                tau=self._getfloat("train", "tau", 1e-4),
                seed=self.seed,
                patience=self._getint("train", "patience", 3),
            )
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def k_list(self) -> list:
        raw = self._get("metrics", "k_list", "10")
        try:
            ks = [int(x) for x in raw.split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"[metrics] k_list must be integers, got {raw!r}") from None
        if not ks or min(ks) < 1:
            raise ConfigError("[metrics] k_list must contain positive integers")
        return ks

    def normalized_flag(self) -> bool:
        return self._getbool("metrics", "normalized_denominator", False)

    def echo(self, out_dir: Path) -> None:
        """Write the fully resolved config for exact re-runs."""
        eff = configparser.ConfigParser()
        for section in self.parser.sections():
            eff[section] = dict(self.parser[section])
        if not eff.has_section("run"):
            eff.add_section("run")
        eff.set("run", "seed", str(self.seed))
        if eff.has_section("paths"):
            for key in eff["paths"]:
                raw = eff.get("paths", key).strip()
                if raw:
                    p = Path(raw)
                    eff.set("paths", key, str(p if p.is_absolute() else self.base_dir / p))
        with open(out_dir / "effective.ini", "w") as fh:
            eff.write(fh)


def load_config(path, seed_override=None) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    parser = configparser.ConfigParser()
    try:
        parser.read(p)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse {p}: {e}") from None
    return RunConfig(parser, p.parent.resolve(), seed_override=seed_override)


def _load_graphs_and_split(cfg: RunConfig, split: str):
    gs = ingest.read_graphs(cfg.path("graphs_manifest", must_exist=True))
    ds = ingest.read_dataset(cfg.path(split, must_exist=True))
    return gs, ds


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_prepare(cfg: RunConfig, out_dir: Path) -> int:
    source = cfg._get("prepare", "source", "synthetic")
    if source == "synthetic":
        syn = SyntheticConfig(
            users=cfg._getint("prepare", "users", 200),
            items=cfg._getint("prepare", "items", 50),
            clusters=cfg._getint("prepare", "clusters", 4),
            n_graphs=cfg._getint("prepare", "graphs", 2),
            d_user=cfg._getint("prepare", "dyn_user", 2),
            d_item=cfg._getint("prepare", "dyn_item", 2),
            p_same=cfg._getfloat("prepare", "p_same", 0.9),
            p_cross=cfg._getfloat("prepare", "p_cross", 0.05),
            seed=cfg.seed,
        )
        gs, train, val, test = ingest.synthesize_splits(syn)
    elif source == "citation":
        corpus = cfg._get("prepare", "corpus")
        corpus_path = Path(corpus)
        if not corpus_path.is_absolute():
            corpus_path = cfg.base_dir / corpus_path
        if not corpus_path.exists():
            raise ConfigError(f"[prepare] corpus does not exist: {corpus_path}")
        windows = ingest.SplitSpec(
            train=YearWindow.parse(cfg._get("prepare", "train_window")),
            val=YearWindow.parse(cfg._get("prepare", "val_window")),
            test=YearWindow.parse(cfg._get("prepare", "test_window")),
        )
        cand_raw = cfg._optional("prepare", "candidate_window")
        candidate = YearWindow.parse(cand_raw) if cand_raw else None
        vec_path = cfg._optional("paths", "vectors")
        dim = cfg._getint("paths", "vector_dim", 50) if vec_path else 0
        vectors = None
        if vec_path:
            p = Path(vec_path)
            vectors = ingest.load_word_vectors(p if p.is_absolute() else cfg.base_dir / p, dim)
        records, dangling = ingest.parse_citation_corpus(corpus_path)
        if dangling:
            print(f"note: {len(dangling)} dangling references ignored")
        gs_vocab = ingest.build_citation_graphs(records, windows.train)
        gs = gs_vocab[0]
        rate = cfg._getfloat("prepare", "sample_rate", 1.0)

        def gen(window):
            return ingest.generate_labeled_pairs(
                records, gs_vocab, window, candidate_window=candidate,
                vectors=vectors, dim=dim, sample_rate=rate, seed=cfg.seed)

        train = ingest.filter_min_examples(
            gen(windows.train),
            min_user=cfg._getint("prepare", "min_user", 20),
            min_author=cfg._getint("prepare", "min_author", 20))
        val = ingest.restrict_to_seen(gen(windows.val), train)
        test = ingest.restrict_to_seen(gen(windows.test), train)
    else:
        raise ConfigError(f"[prepare] source must be synthetic or citation, got {source!r}")

    ingest.write_graphs(gs, out_dir)
    for name, split_ds in (("train", train), ("val", val), ("test", test)):
        ingest.write_dataset(split_ds, out_dir / f"{name}.jsonl")
    cfg.echo(out_dir)
    print(f"prepared {len(gs.graphs)} graphs; "
          f"splits: train={len(train)} val={len(val)} test={len(test)} -> {out_dir}")
    return 0


def _build_model(cfg: RunConfig, gs: GraphSet, train: Dataset) -> MedresModel:
    return MedresModel(gs, train.user_types, train.item_types,
                       train.d_user, train.d_item, cfg.model_config(), seed=cfg.seed)


def cmd_train(cfg: RunConfig, out_dir: Path, mode=None) -> int:
    if mode:  # fold the flag into the config so the echo reproduces it
        if not cfg.parser.has_section("model"):
            cfg.parser.add_section("model")
        cfg.parser.set("model", "mode", mode)
    gs, train = _load_graphs_and_split(cfg, "train")
    val = ingest.read_dataset(cfg.path("val", must_exist=True))
    model = _build_model(cfg, gs, train)
    tcfg = cfg.train_config()
    result = training.fit(model, train, val, tcfg)
    save_checkpoint(model, out_dir / "checkpoint.bin")
    training.write_history(out_dir / "history.csv", result.history)
    figures.render_history(result.history, out_dir / "history.png")
    cfg.echo(out_dir)
    val_scores, _ = model.batch_score(val)
    for k in cfg.k_list():
        instances = metrics_mod.instances_from_scores(val_scores, val.labels, val.user_keys, k)
        rep = metrics_mod.micro_papk(instances, k=k)
        print(f"val micro-pAp@{k} = {rep.value:.4f}")
    print(f"best iteration {result.best_iteration} "
          f"(val micro-pAp@{tcfg.k} = {result.best_val:.4f}); outputs -> {out_dir}")
    return 0


def cmd_eval(cfg: RunConfig, out_dir: Path, checkpoint: Path, split: str) -> int:
    gs, ds = _load_graphs_and_split(cfg, split)
    model = load_checkpoint(checkpoint, gs)
    scores, _ = model.batch_score(ds)
    reports_by_k = {}
    for k in cfg.k_list():
        instances = metrics_mod.instances_from_scores(scores, ds.labels, ds.user_keys, k)
        reports = metrics_mod.standard_reports(instances, k, normalized=cfg.normalized_flag())
        reports_by_k[k] = reports
        with open(out_dir / f"metrics_k{k}.json", "w") as fh:
            fh.write(metrics_mod.reports_to_json(reports) + "\n")
        reports["micro_papk"].write_per_user_csv(out_dir / f"per_user_k{k}.csv")
        print(f"k={k}: " + " ".join(
            f"{name}={rep.value:.4f}" for name, rep in sorted(reports.items())))
    figures.render_metric_curves(reports_by_k, out_dir / "metrics_vs_k.png")
    cfg.echo(out_dir)
    return 0


def _item_ref(example) -> str:
    return "|".join(f"{t}:{i}" for t, i in example.item_ids)


def cmd_score(cfg: RunConfig, out_dir: Path, checkpoint: Path, dataset_path: Path) -> int:
    gs = ingest.read_graphs(cfg.path("graphs_manifest", must_exist=True))
    model = load_checkpoint(checkpoint, gs)
    ds = ingest.read_dataset(dataset_path)
    path = out_dir / "scores.tsv"
    with open(path, "w") as fh:
        fh.write("user_key\titem_ref\tscore\n")
        if len(ds):
            scores, _ = model.batch_score(ds)
            for i, ex in enumerate(ds.examples()):
                fh.write(f"{ds.user_keys[i]}\t{_item_ref(ex)}\t{scores[i]:.10g}\n")
    cfg.echo(out_dir)
    print(f"wrote {len(ds)} scores -> {path}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="medres",
                                     description="prepare, train, evaluate, score")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("prepare", "train", "eval", "score"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="INI config file")
        sp.add_argument("--seed", type=int, default=None, help="overrides MEDRES_SEED and the config")
        sp.add_argument("--out", required=True, help="output directory")
        if name == "train":
            sp.add_argument("--mode", default=None, choices=("medres", "collab", "cof"),
                            help="overrides [model] mode from the config")
        if name == "eval":
            sp.add_argument("--checkpoint", required=True)
            sp.add_argument("--split", default="test", choices=("train", "val", "test"))
        if name == "score":
            sp.add_argument("--checkpoint", required=True)
            sp.add_argument("--dataset", required=True, help="JSONL examples to score")
    return parser


def main(argv=None) -> int:
    args = build_arg_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed_override=args.seed)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "prepare":
            return cmd_prepare(cfg, out_dir)
        if args.command == "train":
            return cmd_train(cfg, out_dir, mode=args.mode)
        if args.command == "eval":
            return cmd_eval(cfg, out_dir, Path(args.checkpoint), args.split)
        if args.command == "score":
            return cmd_score(cfg, out_dir, Path(args.checkpoint), Path(args.dataset))
        raise AssertionError(args.command)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except IngestError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_DIGEST
    except FileNotFoundError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
