"""Command-line entry point: ``rhgn {synth,train,eval,export-attention}``.

Run configuration is a flat ``key = value`` file.  Precedence is
command-line flag > config file > built-in default; the effective
configuration is echoed to the output directory.

Exit codes: 0 success, 2 configuration error, 3 I/O or input-data error,
4 numeric divergence.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from .checkpoint import read_checkpoint
from .estimator import RHGNClassifier
from .exceptions import (
    BadConfig,
    CheckpointError,
    DivergedLoss,
    GraphError,
    RHGNError,
    UnknownNodeId,
)
from .hetgraph import load_embeddings, load_graph, load_labels, parse_consolidation, write_graph, write_labels
from .synthdata import SynthConfig, generate
from .training import TrainConfig, write_history
from .validation import check_node_ids

log = logging.getLogger("rhgn")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4

PATH_KEYS = ("nodes", "edges", "labels", "embeddings", "out", "checkpoint")
DATA_KEYS = ("task", "num_classes", "add_reverse")


class ConfigError(RHGNError):
    pass


# ----------------------------------------------------------------------
# config handling


def read_config_file(path) -> Dict[str, str]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    text = Path(path).read_text(encoding="utf-8")
    try:
        parser.read_string("[run]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return dict(parser["run"])


def _parse_bool(key: str, raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {raw!r}")


def _convert(key: str, raw, default):
    if not isinstance(raw, str):
        return raw
    try:
        if key == "ablation":
            return parse_consolidation(raw) if raw.strip() else {}
        if key == "batch_size":
            return "full" if raw.strip() == "full" else int(raw)
        if key == "split_ratios":
            return tuple(float(x) for x in raw.split(","))
        if isinstance(default, bool):
            return _parse_bool(key, raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} ({exc})") from None
    return raw.strip()


def _field_defaults(cls) -> Dict[str, object]:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        else:
            out[f.name] = f.default_factory()
    return out


def resolve_config(args, allowed_model_cls) -> Dict[str, object]:
    """Merge defaults, config file and flags; reject unknown keys."""
    defaults = _field_defaults(allowed_model_cls)
    extra = {k: None for k in PATH_KEYS}
    if allowed_model_cls is TrainConfig:
        extra.update({"task": None, "num_classes": 0, "add_reverse": True})
    raw: Dict[str, object] = {}
    if args.config:
        raw.update(read_config_file(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = v
    if args.seed is not None:
        raw["seed"] = args.seed
    if getattr(args, "ablation", None):
        raw["ablation"] = args.ablation
    if getattr(args, "deterministic", False):
        raw["deterministic"] = True
    if args.out:
        raw["out"] = args.out
    unknown = sorted(set(raw) - set(defaults) - set(extra))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    merged = {**defaults, **extra}
    for k, v in raw.items():
        merged[k] = _convert(k, v, merged.get(k)) if k not in PATH_KEYS else str(v)
    return merged


def split_config(merged: Dict[str, object], cls):
    names = {f.name for f in dataclasses.fields(cls)}
    try:
        return cls(**{k: v for k, v in merged.items() if k in names})
    except (BadConfig, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _require(merged, *keys):
    missing = [k for k in keys if not merged.get(k)]
    if missing:
        raise ConfigError(f"missing required key(s): {', '.join(missing)}")


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_data(merged):
    graph = load_graph(merged["nodes"], merged["edges"])
    labels = None
    if merged.get("labels"):
        labels = load_labels(merged["labels"], task=merged.get("task"),
                             num_classes=merged.get("num_classes") or None, graph=graph)
    return graph, labels


# ----------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    merged = resolve_config(args, SynthConfig)
    _require(merged, "out")
    cfg = split_config(merged, SynthConfig)
    try:
        cfg.validate()
    except BadConfig as exc:
        raise ConfigError(str(exc)) from None
    graph, labels = generate(cfg)
    out = Path(merged["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_graph(graph, out / "nodes.tsv", out / "edges.tsv")
    write_labels(labels, out / "labels.tsv")
    _write_json(out / "config_echo.json", dataclasses.asdict(cfg))
    print(f"wrote {graph.num_nodes} nodes, {graph.num_edges} edges, {len(labels)} labels to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    merged = resolve_config(args, TrainConfig)
    _require(merged, "nodes", "edges", "labels", "out")
    config = split_config(merged, TrainConfig)
    out = Path(merged["out"])
    out.mkdir(parents=True, exist_ok=True)
    echo = {k: (v if k != "split_ratios" else list(v)) for k, v in merged.items()}
    _write_json(out / "config_echo.json", echo)

    graph, labels = _load_data(merged)
    pretrained = None
    if merged.get("embeddings"):
        dim = config.d
        first = Path(merged["embeddings"]).read_text(encoding="utf-8").split("\n", 1)[0]
        if first.strip():
            dim = len(first.split("\t")) - 1
        pretrained = load_embeddings(merged["embeddings"], dim, graph)

    est = RHGNClassifier.from_config(config, add_reverse=bool(merged.get("add_reverse", True)))
    est.fit(graph, labels, pretrained=pretrained)
    est.save(out / "checkpoint.json")
    write_history(est.history_, out / "history.csv")
    reports = {
        "valid": est.evaluate(None, labels, est.split_.valid_ids, "valid").to_dict(),
        "test": est.evaluate(None, labels, est.split_.test_ids, "test").to_dict(),
    }
    _write_json(out / "metrics.json", reports)
    for name, rep in reports.items():
        print(f"{name}: accuracy={rep['accuracy']:.4f} macro_f1={rep['macro_f1']:.4f}")
    return EXIT_OK


def _restore(args, merged) -> RHGNClassifier:
    ckpt = args.checkpoint or merged.get("checkpoint")
    if not ckpt:
        raise ConfigError("missing --checkpoint")
    _require(merged, "nodes", "edges")
    graph, _ = _load_data({**merged, "labels": None})
    return RHGNClassifier.load(ckpt, graph)


def cmd_eval(args) -> int:
    merged = resolve_config(args, TrainConfig)
    _require(merged, "labels")
    est = _restore(args, merged)
    labels = load_labels(merged["labels"], task=est.task_ if merged.get("task") is None else merged["task"],
                         num_classes=len(est.classes_), graph=est.graph_)
    split = est.split_
    reports = {}
    for name, ids in (("valid", split.valid_ids), ("test", split.test_ids)):
        if ids:
            reports[name] = est.evaluate(None, labels, ids, name).to_dict()
    if merged.get("out"):
        out = Path(merged["out"])
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "metrics.json", reports)
    for name, rep in reports.items():
        print(f"{name}: accuracy={rep['accuracy']:.4f} macro_f1={rep['macro_f1']:.4f}")
    return EXIT_OK


def cmd_export_attention(args) -> int:
    merged = resolve_config(args, TrainConfig)
    _require(merged, "out")
    est = _restore(args, merged)
    graph = est.graph_
    wanted = [n for part in (args.nodes or []) for n in part.split(",") if n]
    if not wanted:
        raise ConfigError("export-attention needs --nodes")
    ids = set(check_node_ids(wanted, graph))
    out = Path(merged["out"])
    if out.parent:
        out.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(out, "w", encoding="utf-8") as fh:
        for rec in est.attention():
            for row in rec.rows(graph):
                keep = row["dst"] in ids or (args.direction == "both" and row["src"] in ids)
                if keep:
                    fh.write(json.dumps(row) + "\n")
                    n += 1
    print(f"wrote {n} attention records to {out}")
    return EXIT_OK


# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (file for export-attention)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    model_opts = argparse.ArgumentParser(add_help=False)
    model_opts.add_argument("--ablation", metavar="consolidate=R1,R2:TARGET",
                            help="merge relations before training")
    model_opts.add_argument("--deterministic", action="store_true",
                            help="64-bit, single-threaded, bit-reproducible run")

    parser = argparse.ArgumentParser(prog="rhgn", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    sub.add_parser("train", parents=[common, model_opts], help="train and evaluate")
    p_eval = sub.add_parser("eval", parents=[common, model_opts], help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint")
    p_exp = sub.add_parser("export-attention", parents=[common, model_opts],
                           help="dump attention weights as JSON lines")
    p_exp.add_argument("--checkpoint")
    p_exp.add_argument("--nodes", action="append", help="node ids, comma separated")
    p_exp.add_argument("--direction", choices=("in", "both"), default="in",
                       help="in: edges targeting the nodes; both: also edges leaving them")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "export-attention": cmd_export_attention,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, BadConfig, UnknownNodeId) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergedLoss as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (GraphError, CheckpointError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
