"""Command-line front end.

    advxmtc gen-data --out data/
    advxmtc train    --train data/train.txt --out runs/plain
    advxmtc cluster  --train data/train.txt --out runs/tree
    advxmtc attack   --model runs/plain/model.bin --train data/train.txt \\
                     --test data/test.txt --embeddings data/embeddings.txt --out runs/atk
    advxmtc evaluate --report runs/atk/report.json --out runs/eval

Every subcommand also reads ``--config FILE`` (INI, one section per
subcommand); explicit flags override file values, and the fully resolved
configuration is written to ``<out>/config.ini``.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attack import NEGATIVE, POSITIVE, AttackConfig, EmbeddingKnnProvider
from .clustering import ClusterTree, cluster_labels
from .dataset import (
    GenConfig,
    TfidfVectorizer,
    generate_powerlaw_dataset,
    label_frequencies,
    load_dataset,
    load_embeddings,
    make_frequency_bins,
    rank_frequency_slope,
    save_dataset,
    save_embeddings,
    synthetic_embeddings,
    train_test_split,
)
from .evaluation import (
    EmbeddingSimilarity,
    Thresholds,
    aggregate_report,
    export_plot_data,
    export_report,
    load_report,
    predicted_topk,
    qualifying_pairs,
    run_campaign,
    sample_attack_targets,
    write_outcomes,
)
from .transport import SubprocessOracle, SubprocessProvider, SubprocessTransport
from .victim import LossSpec, ModelOracle, TrainOptions, load_model, save_model, train

log = logging.getLogger("advxmtc")


class UsageError(Exception):
    pass


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt_int(v):
    return None if v in (None, "", "none") else int(v)


# (type, default) per key; keys double as --flag names with dashes
SCHEMAS = {
    "gen-data": {
        "out": (str, None), "seed": (int, 0),
        "n_docs": (int, 2000), "n_labels": (int, 200), "vocab_size": (int, 3000),
        "zipf_s": (float, 1.2), "labels_per_doc": (float, 3.0), "doc_length": (float, 50.0),
        "signal_tokens": (int, 4), "signal_rate": (float, 3.0), "topic_size": (int, 5),
        "topic_tokens": (int, 4), "topic_affinity": (float, 0.6), "background_s": (float, 1.0),
        "test_fraction": (float, 0.25), "embedding_dim": (int, 32),
    },
    "train": {
        "train": (str, None), "out": (str, None), "seed": (int, 0),
        "loss": (str, "bce"), "mode": (str, "plain"), "beta": (float, 0.9),
        "prop_a": (float, 0.55), "prop_b": (float, 1.5),
        "learning_rate": (float, 2.0), "epochs": (int, 30), "batch_size": (int, 32), "l2": (float, 0.0),
    },
    "cluster": {
        "train": (str, None), "out": (str, None), "seed": (int, 0), "min_leaf": (int, 3),
    },
    "attack": {
        "train": (str, None), "test": (str, None), "out": (str, None), "seed": (int, 0),
        "model": (str, None), "oracle_cmd": (str, None),
        "embeddings": (str, None), "provider_cmd": (str, None), "timeout": (float, 30.0),
        "goal": (str, "positive"), "k": (int, 5), "theta": (float, 0.10),
        "max_candidates": (int, 50), "per_bin": (_opt_int, 200), "total": (_opt_int, None),
        "min_labels_per_bin": (int, 100), "tree": (str, None), "cluster": (_bool, True),
        "strict": (_bool, False), "similarity_floor": (float, 0.8), "change_cap": (float, 0.10),
        "parallel": (int, 1),
    },
    "evaluate": {
        "report": (str, None), "series": (str, None), "out": (str, None),
        "strict": (_bool, False), "similarity_floor": (float, 0.8), "change_cap": (float, 0.10),
    },
}

REQUIRED = {
    "gen-data": ("out",),
    "train": ("train", "out"),
    "cluster": ("train", "out"),
    "attack": ("train", "test", "out"),
    "evaluate": ("out",),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="advxmtc", description="Adversarial attacks on multilabel text classifiers.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, schema in SCHEMAS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI file; section [%s]" % name)
        for key, (typ, default) in schema.items():
            flag = "--" + key.replace("_", "-")
            p.add_argument(flag, dest=key, default=None, type=str,
                           help=f"default: {default}")
    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Schema defaults, then the config file section, then explicit flags."""
    schema = SCHEMAS[command]
    raw = {k: d for k, (_, d) in schema.items()}
    if args.config:
        cp = configparser.ConfigParser()
        if not cp.read(args.config, encoding="utf-8"):
            raise UsageError(f"cannot read config file {args.config}")
        if cp.has_section(command):
            for key, value in cp[command].items():
                key = key.replace("-", "_")
                if key not in schema:
                    raise UsageError(f"unknown config key {key!r} for {command}")
                raw[key] = value
    for key in schema:
        value = getattr(args, key)
        if value is not None:
            raw[key] = value
    resolved = {}
    for key, (typ, _) in schema.items():
        value = raw[key]
        try:
            resolved[key] = None if value is None else typ(value)
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {exc}") from None
    missing = [k for k in REQUIRED[command] if resolved.get(k) is None]
    if missing:
        raise UsageError("missing required settings: " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return resolved


def write_config(cfg: dict, command: str, out: Path) -> None:
    cp = configparser.ConfigParser()
    cp[command] = {k: ("" if v is None else str(v)) for k, v in cfg.items()}
    with open(out / "config.ini", "w", encoding="utf-8") as fh:
        cp.write(fh)


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_gen_data(cfg: dict, out: Path) -> int:
    gen_keys = GenConfig.__dataclass_fields__
    try:
        gcfg = GenConfig(**{k: v for k, v in cfg.items() if k in gen_keys})
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ds = generate_powerlaw_dataset(gcfg, cfg["seed"])
    train_ds, test_ds = train_test_split(ds, gcfg.test_fraction, cfg["seed"])
    save_dataset(train_ds, out / "train.txt")
    save_dataset(test_ds, out / "test.txt")
    save_embeddings(synthetic_embeddings(gcfg, cfg["seed"], cfg["embedding_dim"]), out / "embeddings.txt")
    counts = label_frequencies(ds)
    stats = {
        "num_labels": ds.num_labels,
        "n_docs": len(ds),
        "n_train": len(train_ds),
        "n_test": len(test_ds),
        "vocab_size": ds.vocab_size,
        "label_counts": [int(c) for c in counts],
        "rank_frequency_slope": rank_frequency_slope(counts),
        "seed": cfg["seed"],
    }
    with open(out / "stats.json", "w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=1, sort_keys=True)
        fh.write("\n")
    log.info("wrote %d train / %d test documents to %s", len(train_ds), len(test_ds), out)
    return 0


def cmd_train(cfg: dict, out: Path) -> int:
    ds = load_dataset(cfg["train"])
    try:
        spec = LossSpec(cfg["loss"], cfg["mode"], cfg["beta"], cfg["prop_a"], cfg["prop_b"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    opt = TrainOptions(cfg["learning_rate"], cfg["epochs"], cfg["batch_size"], cfg["seed"], cfg["l2"])
    model = train(ds, spec, opt)
    save_model(model, out / "model.bin")
    with open(out / "train_log.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "mean_loss"))
        for epoch, loss in enumerate(model.meta["loss_history"]):
            w.writerow((epoch, repr(loss)))
    log.info("final mean loss %.6f", model.meta["loss_history"][-1])
    return 0


def cmd_cluster(cfg: dict, out: Path) -> int:
    ds = load_dataset(cfg["train"])
    if ds.num_labels < cfg["min_leaf"]:
        raise UsageError(f"{ds.num_labels} labels cannot fill a leaf of {cfg['min_leaf']}")
    tree = cluster_labels(ds, min_leaf=cfg["min_leaf"], seed=cfg["seed"])
    tree.save(out / "tree.json")
    log.info("%d leaves", len(tree.leaves()))
    return 0


def _goal_kind(name: str) -> str:
    aliases = {"positive": POSITIVE, POSITIVE: POSITIVE, "negative": NEGATIVE, NEGATIVE: NEGATIVE}
    if name not in aliases:
        raise UsageError(f"goal must be positive or negative, not {name!r}")
    return aliases[name]


def cmd_attack(cfg: dict, out: Path) -> int:
    kind = _goal_kind(cfg["goal"])
    if (cfg["model"] is None) == (cfg["oracle_cmd"] is None):
        raise UsageError("give exactly one of --model and --oracle-cmd")
    if (cfg["embeddings"] is None) == (cfg["provider_cmd"] is None):
        raise UsageError("give exactly one of --embeddings and --provider-cmd")
    train_ds = load_dataset(cfg["train"])
    test_ds = load_dataset(cfg["test"], vocab=train_ds.vocab, num_labels=train_ds.num_labels)
    transports = []
    try:
        if cfg["model"]:
            oracle = ModelOracle(load_model(cfg["model"]))
        else:
            transports.append(SubprocessTransport(cfg["oracle_cmd"], cfg["timeout"]))
            oracle = SubprocessOracle(transports[-1], train_ds.num_labels)
        embeddings = load_embeddings(cfg["embeddings"]) if cfg["embeddings"] else None
        if embeddings is not None:
            provider = EmbeddingKnnProvider(embeddings, cfg["max_candidates"])
        else:
            transports.append(SubprocessTransport(cfg["provider_cmd"], cfg["timeout"]))
            provider = SubprocessProvider(transports[-1], cfg["max_candidates"])
        similarity = EmbeddingSimilarity(embeddings) if embeddings is not None else None

        tree = None
        if kind == NEGATIVE and cfg["cluster"]:
            if cfg["tree"]:
                tree = ClusterTree.load(cfg["tree"])
            else:
                X = TfidfVectorizer.fit(train_ds).transform(train_ds.documents)
                tree = cluster_labels(train_ds, X, seed=cfg["seed"])

        freqs = label_frequencies(train_ds)
        preds = predicted_topk(oracle, test_ds, cfg["k"])
        qualifying = np.zeros(train_ds.num_labels, dtype=bool)
        for _, l in qualifying_pairs(test_ds, preds, POSITIVE, range(train_ds.num_labels)):
            qualifying[l] = True
        if not qualifying.any():
            qualifying[:] = True
            log.warning("no correctly classified test samples; binning over all labels")
        bins = make_frequency_bins(freqs, qualifying, cfg["min_labels_per_bin"])
        pairs = sample_attack_targets(
            test_ds, oracle, kind, bins, cfg["per_bin"], cfg["k"], tree=tree,
            use_clustering=kind == NEGATIVE and cfg["cluster"], seed=cfg["seed"], total=cfg["total"],
        )
        if not pairs:
            log.warning("no (document, target) pairs qualify; writing an empty report")
        workers = cfg["parallel"] if getattr(oracle, "concurrency_safe", False) and embeddings is not None else 1
        result = run_campaign(
            oracle, provider, test_ds, pairs, kind, bins,
            AttackConfig(cfg["theta"], cfg["max_candidates"], cfg["similarity_floor"]),
            cfg["k"], similarity, workers,
        )
    finally:
        for t in transports:
            t.close()

    strict = Thresholds(cfg["similarity_floor"], cfg["change_cap"]) if cfg["strict"] else None
    report = aggregate_report(result.records, bins, strict)
    write_outcomes(result, out / "outcomes.jsonl")
    export_report(report, out / "report.csv", "csv")
    export_report(report, out / "report.json", "json")
    o = report.overall
    log.info("%d attacks, %d errors, success %.2f%%", o.n_attacks, o.n_errors, o.success_rate_pct)
    return 0


def cmd_evaluate(cfg: dict, out: Path) -> int:
    """Re-aggregate one or more JSON reports and write CSV + plot data.

    ``--series name=path,name=path`` names several reports (e.g. one per
    loss mode); ``--report path`` is shorthand for a single series.
    """
    series = {}
    if cfg["series"]:
        for item in cfg["series"].split(","):
            name, sep, path = item.partition("=")
            if not sep:
                raise UsageError(f"series entries look like name=path, got {item!r}")
            series[name.strip()] = path.strip()
    if cfg["report"]:
        series.setdefault("report", cfg["report"])
    if not series:
        raise UsageError("give --report or --series")
    strict = Thresholds(cfg["similarity_floor"], cfg["change_cap"]) if cfg["strict"] else None
    reports = {}
    for name, path in series.items():
        loaded = load_report(path)
        reports[name] = aggregate_report(loaded.records, loaded.bins, strict)
        export_report(reports[name], out / f"{name}.csv", "csv")
    export_plot_data(reports, out / "plot_data.csv")
    for name, r in reports.items():
        log.info("%s: %d attacks, success %.2f%%", name, r.overall.n_attacks, r.overall.success_rate_pct)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "cluster": cmd_cluster,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args.command, args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        write_config(cfg, args.command, out)
        return COMMANDS[args.command](cfg, out)
    except UsageError as exc:
        print(f"advxmtc: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"advxmtc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
