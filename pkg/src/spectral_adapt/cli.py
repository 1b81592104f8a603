"""Command-line interface: synth, fingerprint, train and analyze."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import analyze_node, class_average_csv, class_average_responses, node_csv, to_json
from .fingerprint import compute_fingerprint, make_projection
from .graph import generate_csbm_anomaly_graph, load_graph, make_splits, save_graph
from .metrics import RunAggregate
from .trainer import (
    TrainConfig,
    ablation_suite,
    format_table,
    prepare_inputs,
    read_checkpoint,
    train_once,
    write_checkpoint,
)

logger = logging.getLogger("spectral_adapt")

TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))
SYNTH_DEFAULTS = {"n": 1000, "rate": 0.05, "p_in": 0.01, "p_out": 0.0, "dim": 16, "signal": 2.0}
DATA_KEYS = ("data_dir", "edges", "features", "labels")
OTHER_DEFAULTS = {"out_dir": ".", "mode": "exact", "samples": 20, "checkpoint": None, "nodes": None}
CONFIG_KEYS = set(TRAIN_KEYS) | set(SYNTH_DEFAULTS) | set(DATA_KEYS) | set(OTHER_DEFAULTS)


class CliError(Exception):
    pass


def _dump(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def load_config_file(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise CliError(f"{path}: config must be a JSON object")
    unknown = sorted(set(doc) - CONFIG_KEYS)
    if unknown:
        raise CliError(f"{path}: unknown config keys {unknown}")
    return doc


def resolve(args) -> dict:
    """Merge built-in defaults < config file < command-line flags."""
    merged = {**TrainConfig().to_dict(), **SYNTH_DEFAULTS, **OTHER_DEFAULTS}
    merged.update({k: None for k in DATA_KEYS})
    if args.config:
        merged.update(load_config_file(args.config))
    for key in CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def train_config(opts: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict({k: opts[k] for k in TRAIN_KEYS})
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid training config: {exc}") from exc


def load_data(opts: dict):
    if opts["data_dir"]:
        base = Path(opts["data_dir"])
        edges = opts["edges"] or base / "edges.txt"
        feats = opts["features"] or base / "features.csv"
        labels = opts["labels"] or (base / "labels.txt" if (base / "labels.txt").exists() else None)
    else:
        edges, feats, labels = opts["edges"], opts["features"], opts["labels"]
    if not edges or not feats:
        raise CliError("no input graph: pass --data-dir or --edges and --features")
    try:
        return load_graph(edges, feats, labels)
    except OSError as exc:
        raise CliError(f"cannot read graph: {exc}") from exc
    except ValueError as exc:
        raise CliError(str(exc)) from exc


def _out_dir(opts) -> Path:
    out = Path(opts["out_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc.strerror}") from exc
    return out


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc.strerror}") from exc


def cmd_synth(opts: dict) -> int:
    if int(opts["n"]) < 1:
        raise CliError("n must be at least 1")
    params = {k: opts[k] for k in SYNTH_DEFAULTS}
    try:
        graph = generate_csbm_anomaly_graph(
            int(params["n"]), float(params["rate"]), float(params["p_in"]), float(params["p_out"]),
            int(params["dim"]), float(params["signal"]), seed=int(opts["seed"]),
        )
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    out = _out_dir(opts)
    try:
        paths = save_graph(graph, out)
    except OSError as exc:
        raise CliError(f"cannot write graph files: {exc.strerror}") from exc
    manifest = {
        "version": __version__,
        "config_echo": {**params, "seed": int(opts["seed"])},
        "seed": int(opts["seed"]),
        "files": {k: p.name for k, p in paths.items()},
        "num_nodes": graph.num_nodes,
        "num_edges": graph.num_edges,
        "num_anomalies": int(graph.labels.sum()),
    }
    _write(out / "manifest.json", _dump(manifest))
    logger.info("wrote %d-node graph to %s", graph.num_nodes, out)
    return 0


def cmd_fingerprint(opts: dict, output: str | None) -> int:
    graph = load_data(opts)
    seed = int(opts["seed"])
    proj = make_projection(graph.num_features, seed)
    try:
        fp = compute_fingerprint(
            graph, proj, opts["mode"], int(opts["w"]), seed,
            num_probes=int(opts["num_probes"]), lanczos_steps=int(opts["lanczos_steps"]),
        )
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    doc = {
        "version": __version__,
        "config_echo": {"mode": opts["mode"], "w": opts["w"], "seed": seed,
                        "num_probes": opts["num_probes"], "lanczos_steps": opts["lanczos_steps"]},
        "fingerprint": fp.to_list(),
    }
    text = _dump(doc)
    if output:
        _write(Path(output), text)
    sys.stdout.write(text)
    return 0


def _run_reports(graph, config: TrainConfig):
    inputs, proj = prepare_inputs(graph, config)
    reports = []
    for r in range(config.runs):
        seed = config.seed + r
        splits = make_splits(graph, config.train_ratio, seed)
        rep = train_once(graph, splits, config, seed, inputs=inputs, proj=proj)
        logger.info("run %d (seed %d): test AUC %.4f, F1-macro %.4f", r, seed, rep.test.auc, rep.test.f1_macro)
        reports.append(rep)
    return reports


def _aggregate(reports) -> dict:
    aucs = [rep.test.auc for rep in reports]
    if len(reports) >= 3:
        return RunAggregate([rep.test for rep in reports], [rep.seed for rep in reports]).to_dict()
    return {"mean_auc": float(np.mean(aucs)), "seeds": [rep.seed for rep in reports],
            "runs": [rep.test.to_dict() for rep in reports]}


def _best_report(reports):
    return max(reports, key=lambda rep: (rep.validation.auc, -rep.seed))


def cmd_train(opts: dict, ablation: bool) -> int:
    config = train_config(opts)
    graph = load_data(opts)
    if graph.labels is None:
        raise CliError("training needs node labels")
    out = _out_dir(opts)
    echo = config.to_dict()
    log_lines = []
    if ablation:
        if config.runs < 3:
            raise CliError("--ablation needs at least 3 runs for the trimmed mean")
        rows = ablation_suite(graph, config)
        variants = []
        ckpt_dir = out / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)
        for name, cfg, agg, reports in rows:
            variants.append({"variant": name, "config": cfg.to_dict(), "aggregate": agg.to_dict(),
                             "reports": [rep.to_dict() for rep in reports]})
            for rep in reports:
                log_lines += [_dump_line({"variant": name, "seed": rep.seed, **rec}) for rec in rep.log]
            write_checkpoint(ckpt_dir / f"{name}.json", _best_report(reports).checkpoint, {"variant": name})
        report = {"version": __version__, "config_echo": echo, "ablation": variants}
        table = format_table(rows)
    else:
        try:
            reports = _run_reports(graph, config)
        except FloatingPointError as exc:
            raise CliError(str(exc)) from exc
        best = _best_report(reports)
        for rep in reports:
            log_lines += [_dump_line({"seed": rep.seed, **rec}) for rec in rep.log]
        write_checkpoint(out / "checkpoint.json", best.checkpoint)
        report = {
            "version": __version__,
            "config_echo": echo,
            "aggregate": _aggregate(reports),
            "reports": [rep.to_dict() for rep in reports],
            "checkpoint": {"file": "checkpoint.json", "seed": best.seed, "best_epoch": best.best_epoch},
        }
        agg = report["aggregate"]
        if "trimmed_auc" in agg:
            table = f"{'runs':<8s} {'AUC':>8s} {'F1-mac':>8s}\n{len(reports):<8d} {agg['trimmed_auc']:8.4f} {agg['trimmed_f1_macro']:8.4f}"
        else:
            table = f"{'runs':<8s} {'AUC':>8s}\n{len(reports):<8d} {agg['mean_auc']:8.4f}"
    _write(out / "train_log.jsonl", "".join(log_lines))
    _write(out / "report.json", _dump(report))
    _write(out / "report.txt", f"spectral-adapt {__version__}\n{table}\n")
    if not opts.get("quiet"):
        sys.stdout.write(table + "\n")
    return 0


def _dump_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True) + "\n"


def _parse_nodes(text) -> list[int]:
    if isinstance(text, list):
        return [int(v) for v in text]
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise CliError(f"invalid node list {text!r}") from exc


def cmd_analyze(opts: dict, class_average: bool, fmt: str) -> int:
    if not opts["checkpoint"]:
        raise CliError("analyze needs --checkpoint")
    path = Path(opts["checkpoint"])
    if not path.is_file():
        raise CliError(f"checkpoint not found: {path}")
    try:
        ckpt = read_checkpoint(path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise CliError(f"invalid checkpoint {path}: {exc}") from exc
    graph = load_data(opts)
    out = _out_dir(opts)
    written = []
    try:
        if class_average:
            avg = class_average_responses(ckpt, graph, int(opts["samples"]), int(opts["seed"]))
            name = "class_average." + fmt
            _write(out / name, class_average_csv(avg) if fmt == "csv" else to_json(avg))
            written.append(name)
        nodes = _parse_nodes(opts["nodes"]) if opts["nodes"] is not None else []
        if not nodes and not class_average:
            raise CliError("analyze needs --nodes or --class-average")
        for node in nodes:
            res = analyze_node(ckpt, graph, node)
            name = f"node_{node}.{fmt}"
            _write(out / name, node_csv(res) if fmt == "csv" else to_json(res))
            written.append(name)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    manifest = {
        "version": __version__,
        "config_echo": {"checkpoint": str(path), "nodes": nodes, "class_average": class_average,
                        "samples": opts["samples"], "seed": opts["seed"], "format": fmt},
        "files": written,
    }
    _write(out / "analysis_manifest.json", _dump(manifest))
    return 0


def _global_flags(parser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="JSON config file (flags override it)")
    parser.add_argument("--seed", type=int, default=default)
    parser.add_argument("--out-dir", dest="out_dir", default=default)
    parser.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS if suppress else False)


def _data_flags(parser) -> None:
    parser.add_argument("--data-dir", dest="data_dir", help="directory with edges.txt, features.csv, labels.txt")
    parser.add_argument("--edges")
    parser.add_argument("--features")
    parser.add_argument("--labels")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spectral-adapt", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic anomaly graph")
    _global_flags(p, suppress=True)
    p.add_argument("--n", type=int)
    p.add_argument("--rate", type=float)
    p.add_argument("--p-in", dest="p_in", type=float)
    p.add_argument("--p-out", dest="p_out", type=float)
    p.add_argument("--dim", type=int)
    p.add_argument("--signal", type=float)

    p = sub.add_parser("fingerprint", help="20-number spectral fingerprint of a graph")
    _global_flags(p, suppress=True)
    _data_flags(p)
    p.add_argument("--mode", choices=("exact", "stochastic"))
    p.add_argument("--w", type=int)
    p.add_argument("--num-probes", dest="num_probes", type=int)
    p.add_argument("--lanczos-steps", dest="lanczos_steps", type=int)
    p.add_argument("--output", help="also write the JSON here")

    p = sub.add_parser("train", help="train and evaluate over several runs")
    _global_flags(p, suppress=True)
    _data_flags(p)
    p.add_argument("--runs", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--order", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--train-ratio", dest="train_ratio", type=float)
    p.add_argument("--fingerprint-mode", dest="fingerprint_mode", choices=("exact", "stochastic"))
    p.add_argument("--fingerprint-scope", dest="fingerprint_scope", choices=("node", "graph"))
    p.add_argument("--ablation", action="store_true", help="run the six-variant ablation table")

    p = sub.add_parser("analyze", help="frequency-response curves from a checkpoint")
    _global_flags(p, suppress=True)
    _data_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--nodes", help="comma-separated node ids")
    p.add_argument("--class-average", dest="class_average", action="store_true")
    p.add_argument("--samples", type=int)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        opts = resolve(args)
        opts["quiet"] = args.quiet
        if args.command == "synth":
            return cmd_synth(opts)
        if args.command == "fingerprint":
            return cmd_fingerprint(opts, args.output)
        if args.command == "train":
            return cmd_train(opts, args.ablation)
        return cmd_analyze(opts, args.class_average, args.format)
    except CliError as exc:
        print(f"spectral-adapt: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
