"""Command-line entry point: synth, build-graph, train, eval."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import numcore as nc
from .corpus import (CorpusError, GroundTruthTies, RelationMap, SpecError, SynthSpec, Vocabulary,
                     generate_synthetic, load_corpus, write_corpus)
from .evalkit import (EvaluationError, collect_predictions, p_at_n, pr_curve, project_embeddings,
                      ties_recovery_report, write_pr_csv, write_projection)
from .tiesgraph import TiesGraph
from .trainer import (CheckpointError, TrainConfig, TrainingError, load_checkpoint, relation_matrix,
                      save_checkpoint, train)

log = logging.getLogger("tieforge")

PATH_KEYS = ("train", "test", "relations", "checkpoint", "ties")
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
SYNTH_KEYS = {f.name for f in fields(SynthSpec)}


class UsageError(ValueError):
    """Bad configuration or missing inputs; exit status 2."""


def _setup_logging():
    level = os.environ.get("TIEFORGE_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise UsageError(f"TIEFORGE_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def _read_config(path):
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from None
    except ValueError as e:
        raise UsageError(f"config {path} is not valid JSON: {e}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold one flat object")
    data = dict(data)
    if "lambda" in data:
        data["lam"] = data.pop("lambda")
    unknown = set(data) - TRAIN_KEYS - SYNTH_KEYS - set(PATH_KEYS)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return data


def resolve(args):
    """Merge defaults, config file and flags (flags win) into one flat dict."""
    eff = {k: None for k in PATH_KEYS}
    eff.update(TrainConfig().to_dict())
    eff.update({k: v for k, v in asdict(SynthSpec()).items() if k != "seed"})
    eff.update(_read_config(args.config))
    flags = {"seed": args.seed, "lam": args.lam, "theta": args.theta, "gcn_layers": args.gcn_layers,
             "epochs": getattr(args, "epochs", None)}
    flags.update({k: getattr(args, k, None) for k in PATH_KEYS})
    eff.update({k: v for k, v in flags.items() if v is not None})
    if args.graph_off:
        eff["graph_enabled"] = False
    return eff


def train_config(eff):
    try:
        return TrainConfig(**{k: eff[k] for k in TRAIN_KEYS}).validate()
    except (TypeError, nc.ConfigError) as e:
        raise UsageError(str(e)) from None


def synth_spec(eff):
    values = {k: eff[k] for k in SYNTH_KEYS if k in eff}
    for key in ("implications", "exclusions"):
        values[key] = [tuple(x) for x in values[key]]
    try:
        spec = SynthSpec(**values)
        spec.validate()
    except (TypeError, SpecError) as e:
        raise UsageError(str(e)) from None
    return spec


def _need(eff, key):
    path = eff.get(key)
    if path is None:
        raise UsageError(f"--{key} is required")
    if not Path(path).exists():
        raise UsageError(f"{key} path does not exist: {path}")
    return Path(path)


def _echo(out, eff):
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.json").write_text(json.dumps(eff, indent=2, sort_keys=True) + "\n",
                                               encoding="utf-8")


def _write_matrix(path, A, names):
    rows = ["\t" + "\t".join(names)]
    rows += [name + "\t" + "\t".join(repr(x) for x in row) for name, row in zip(names, A.tolist())]
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- subcommands

def cmd_synth(args, eff, out):
    spec = synth_spec(eff)
    _echo(out, eff)
    train_bags, test_bags, vocab, rels, ties = generate_synthetic(spec)
    write_corpus(out / "train.jsonl", train_bags, vocab, rels)
    write_corpus(out / "test.jsonl", test_bags, vocab, rels)
    rels.save(out / "relations.tsv")
    ties.save(out / "ties.tsv", rels.names)
    bags = train_bags + test_bags
    n_na = sum(b.labels == {0} for b in bags)
    print(f"bags={len(bags)} train={len(train_bags)} test={len(test_bags)} na_bags={n_na} "
          f"relations={len(rels)} sentences={sum(len(b.sentences) for b in bags)}")


def cmd_build_graph(args, eff, out):
    config = train_config(eff)
    rels = RelationMap.load(_need(eff, "relations"))
    bags, _ = load_corpus(_need(eff, "train"), rels, d_max=config.max_distance)
    _echo(out, eff)
    g = TiesGraph.from_bags(bags, len(rels), config.theta, config.renormalize)
    _write_matrix(out / "M.tsv", g.M, rels.names)
    _write_matrix(out / "P_hat.tsv", g.P_hat, rels.names)
    _write_matrix(out / "U.tsv", g.U, rels.names)
    (out / "N.tsv").write_text("".join(f"{n}\t{c}\n" for n, c in zip(rels.names, g.N.tolist())),
                               encoding="utf-8")
    print(f"edges={g.edge_count()} filtered_edges={g.filtered_edge_count()} theta={config.theta!r}")


def cmd_train(args, eff, out):
    config = train_config(eff)
    rels = RelationMap.load(_need(eff, "relations"))
    bags, vocab = load_corpus(_need(eff, "train"), rels, d_max=config.max_distance)
    _echo(out, eff)
    graph = TiesGraph.from_bags(bags, len(rels), config.theta, config.renormalize)
    params, trace = train(bags, config, graph, len(vocab))
    extra = {"vocab": vocab.itos, "relations": rels.names, "M": graph.M.tolist(), "N": graph.N.tolist()}
    save_checkpoint(params, config, out / "model.ckpt", extra=extra)
    (out / "loss_trace.csv").write_text("epoch,loss\n" + "".join(f"{e},{v!r}\n" for e, v in trace),
                                        encoding="utf-8")
    print(f"units={sum(len(b.labels) for b in bags)} epochs={config.epochs} "
          f"final_loss={trace[-1][1] if trace else float('nan'):.6f} checkpoint={out / 'model.ckpt'}")


def cmd_eval(args, eff, out):
    rels = RelationMap.load(_need(eff, "relations"))
    params, config, header = load_checkpoint(_need(eff, "checkpoint"), expected_k=len(rels), with_header=True)
    extra = header.get("extra", {})
    if "vocab" not in extra or "M" not in extra:
        raise CheckpointError("checkpoint lacks vocabulary or graph counts")
    if extra.get("relations", rels.names) != rels.names:
        raise CheckpointError("relation mapping differs from the one the checkpoint was trained with")
    vocab = Vocabulary(extra["vocab"][2:])
    if vocab.itos != extra["vocab"]:
        raise CheckpointError("checkpoint vocabulary is malformed")
    bags, _ = load_corpus(_need(eff, "test"), rels, vocab=vocab, d_max=config.max_distance)
    _echo(out, eff)
    graph = TiesGraph.from_counts(extra["M"], extra["N"], config.theta, config.renormalize)
    records = collect_predictions(bags, params, graph, config)
    curve = pr_curve(records)
    write_pr_csv(curve, out / "pr_curve.csv")
    lines = [f"auc={curve.auc:.6f}"]
    for n in (100, 200, 300):
        m = min(n, len(records))
        lines.append(f"P@{n}={p_at_n(records, m):.4f}" + ("" if m == n else f" (clamped to {m})"))
    H = relation_matrix(params, graph, config).values
    if eff.get("ties"):
        ties = GroundTruthTies.load(_need(eff, "ties"), rels)
        report = ties_recovery_report(H, ties, U=graph.U, P_hat=graph.P_hat)
        (out / "recovery.txt").write_text(report.to_text(), encoding="utf-8")
        lines.append(report.to_text().rstrip())
    if args.export_embeddings:
        write_projection(project_embeddings(H, seed=config.seed), rels.names, out / "embeddings.tsv")
    print("\n".join(lines))


COMMANDS = {"synth": cmd_synth, "build-graph": cmd_build_graph, "train": cmd_train, "eval": cmd_eval}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--lambda", dest="lam", type=float)
    common.add_argument("--theta", type=float)
    common.add_argument("--gcn-layers", type=int)
    common.add_argument("--graph-off", action="store_true", help="identity transition matrix and lambda 0")
    common.add_argument("--out", default=".", help="output directory")
    p = argparse.ArgumentParser(prog="tieforge")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a planted synthetic corpus")
    g = sub.add_parser("build-graph", parents=[common], help="write co-occurrence statistics")
    g.add_argument("--train")
    g.add_argument("--relations")
    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--train")
    t.add_argument("--relations")
    t.add_argument("--epochs", type=int)
    e = sub.add_parser("eval", parents=[common], help="held-out evaluation")
    e.add_argument("--test")
    e.add_argument("--relations")
    e.add_argument("--checkpoint")
    e.add_argument("--ties", help="ground-truth ties file for a recovery report")
    e.add_argument("--export-embeddings", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        eff = resolve(args)
        eff["command"] = args.command
        COMMANDS[args.command](args, eff, Path(args.out))
    except UsageError as e:
        print(f"tieforge: error: {e}", file=sys.stderr)
        return 2
    except (CorpusError, TrainingError, CheckpointError, EvaluationError, nc.DimensionError, OSError) as e:
        print(f"tieforge: {args.command} failed: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
