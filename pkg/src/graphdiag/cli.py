"""Command line: ``graphdiag {synth,train,evaluate,export-graph,graph-quality}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
Options may also come from a flat ``key=value`` file given with ``--config``;
flags on the command line override it.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .data import (
    DataFormatError,
    NormStats,
    SynthSpec,
    UnstableProcessError,
    apply_norm,
    dataset_manifest,
    default_faults,
    generate_synthetic,
    load_runs_csv,
    random_ground_truth,
    write_runs_csv,
)
from .graph import LEARNED_VARIANTS, AdjacencyMatrix, topk_sparsify
from .io import atomic_write_text
from .metrics import (
    FddReport,
    evaluate_model,
    heatmap_csv,
    importance_csv,
    mean_report,
    node_importance,
    summary_header,
)
from .models import ModelConfig, TrainConfig, adjacency_matrices, checkpoint_dict, load_checkpoint
from .pipeline import QUALITY_HIDDEN, QUALITY_WINDOW, describe, fit_model, graph_quality, prepare
from .tensor import NumericError

logger = logging.getLogger("graphdiag")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------


def read_config_file(path: Path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()


def resolve(workdir: Path, path: str | None) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    return p if p.is_absolute() else workdir / p


def _require_file(path: Path | None, what: str) -> Path:
    if path is None:
        raise ConfigError(f"{what} is required")
    if not path.is_file():
        raise ConfigError(f"{what} {path} does not exist")
    return path


def _load_runs(path: Path, change_point: int):
    try:
        return load_runs_csv(path, change_point)
    except (DataFormatError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from None


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("GRAPHDIAG_THREADS", "1")))
    except ValueError:
        raise ConfigError("GRAPHDIAG_THREADS must be an integer") from None


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args, workdir: Path) -> int:
    if args.nodes < 2 or args.runs < 1:
        raise ConfigError("--nodes must be >= 2 and --runs >= 1")
    if not 0 <= args.gt_density <= 1:
        raise ConfigError("--gt-density must be in [0, 1]")
    g = random_ground_truth(args.nodes, args.gt_density, seed=args.seed)
    try:
        spec = SynthSpec(n_nodes=args.nodes, n_samples=args.samples, change_point=args.change_point,
                         noise_scale=args.noise, density=args.gt_density, faults=default_faults(args.nodes),
                         ground_truth=g, seed=args.seed)
        runs, g = generate_synthetic(spec, args.runs)
    except UnstableProcessError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = resolve(workdir, args.out)
    truth = resolve(workdir, args.truth)
    write_runs_csv(runs, out)
    atomic_write_text(truth, json.dumps(spec.to_dict(), indent=2))
    print(f"wrote {len(runs)} runs ({spec.n_states} states) to {out}; ground truth in {truth}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _model_config(args, n_nodes: int, n_classes: int, seed: int) -> ModelConfig:
    kind = args.model
    return ModelConfig(
        kind=kind, n_nodes=n_nodes, window=args.window, n_classes=n_classes, hidden=args.hidden,
        variant=args.graph, alpha=args.alpha, embed_dim=args.embed_dim, top_k=args.top_k,
        modules=args.modules if kind == "ensemble" else 1, gcn_bias=not args.no_gcn_bias, norm=args.norm,
        seed=seed,
    )


def _validate_train(args) -> None:
    if args.model not in ("gnn", "ensemble", "mlp", "cnn1d"):
        raise ConfigError(f"unknown model {args.model!r}")
    if args.graph not in LEARNED_VARIANTS:
        raise ConfigError(f"--graph must be one of {', '.join(LEARNED_VARIANTS)}")
    if not args.alpha > 0:
        raise ConfigError("--alpha must be > 0")
    if not 0 < args.train_fraction <= 1:
        raise ConfigError("--train-fraction must be in (0, 1]")
    if not 0 < args.split <= 1:
        raise ConfigError("--split must be in (0, 1]")
    if args.top_k is not None and args.top_k < 1:
        raise ConfigError("--top-k must be >= 1")
    for name in ("window", "stride", "hidden", "epochs", "batch", "repeats", "modules", "embed_dim"):
        if getattr(args, name) < 1:
            raise ConfigError(f"--{name.replace('_', '-')} must be >= 1")
    if args.lr < 0:
        raise ConfigError("--lr must be >= 0")
    if args.batch < 2:
        raise ConfigError("--batch must be >= 2 (batch normalisation)")


def _train_one(payload: dict) -> dict:
    """Train and evaluate one seed; runs in a worker process when parallel."""
    args = argparse.Namespace(**payload["args"])
    runs = load_runs_csv(payload["data"], args.change_point)
    data = prepare(runs, args.split, args.split_seed, args.train_fraction)
    seed = payload["seed"]
    config = _model_config(args, data.n_channels, data.n_classes, seed)
    model, history = fit_model(config, data, TrainConfig(args.epochs, args.lr, args.batch, seed), args.stride)
    extra = {
        "norm_stats": data.stats.to_dict(),
        "norm_fingerprint": data.stats.fingerprint(),
        "train_run_ids": [r.run_id for r in data.train_runs],
        "test_run_ids": [r.run_id for r in data.test_runs],
        "n_classes": data.n_classes,
        "change_point": args.change_point,
        "stride": args.stride,
        "split_seed": args.split_seed,
        "history": history,
    }
    result = {"seed": seed, "checkpoint": checkpoint_dict(model, extra), "history": history, "report": None,
              "manifest": dataset_manifest(data.n_channels, data.n_classes, args.window, args.stride,
                                           args.change_point, data.stats, args.split_seed)}
    if not args.no_eval and data.test_runs:
        report = evaluate_model(model, data.test_runs, config.window, data.n_classes, describe(config))
        result["report"] = report.to_dict()
    return result


def cmd_train(args, workdir: Path) -> int:
    _validate_train(args)
    data_path = _require_file(resolve(workdir, args.data), "--data")
    out_dir = resolve(workdir, args.out)
    seeds = [args.seed + i for i in range(args.repeats)]
    resolved = {k: v for k, v in vars(args).items() if k not in ("func", "workdir", "config", "verbose")}
    t0 = time.time()
    # parse once up front so data errors surface before any training or output
    _load_runs(data_path, args.change_point)
    payloads = [{"args": resolved, "data": str(data_path), "seed": s} for s in seeds]
    workers = min(len(seeds), _threads())
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_train_one, payloads))
    else:
        results = [_train_one(p) for p in payloads]

    checkpoints, reports = [], []
    for res in results:
        suffix = f"_seed{res['seed']}" if len(seeds) > 1 else ""
        ck_path = out_dir / f"checkpoint{suffix}.json"
        atomic_write_text(ck_path, json.dumps(res["checkpoint"]))
        checkpoints.append(str(ck_path))
        loss_lines = ["epoch,loss"] + [f"{i},{repr(v)}" for i, v in enumerate(res["history"])]
        atomic_write_text(out_dir / f"loss{suffix}.csv", "\n".join(loss_lines) + "\n")
        if res["report"] is not None:
            report = FddReport.from_json(json.dumps(res["report"]))
            reports.append(report)
            atomic_write_text(out_dir / f"report{suffix}.json", report.to_json())
            atomic_write_text(out_dir / f"report{suffix}.txt", report.to_text())
    report_paths = [str(out_dir / f"report{'_seed%d' % s if len(seeds) > 1 else ''}.json") for s in seeds] \
        if reports else []
    if len(reports) > 1:
        mean = mean_report(reports)
        atomic_write_text(out_dir / "report_mean.json", mean.to_json())
        atomic_write_text(out_dir / "report_mean.txt", mean.to_text())
        report_paths.append(str(out_dir / "report_mean.json"))
    atomic_write_text(out_dir / "dataset.json", results[0]["manifest"])
    manifest = {
        "config_hash": config_hash(resolved),
        "config": resolved,
        "seeds": seeds,
        "checkpoints": checkpoints,
        "reports": report_paths,
        "wall_clock_seconds": time.time() - t0,
        "version": __version__,
    }
    atomic_write_text(out_dir / "manifest.json", json.dumps(manifest, indent=2, default=str))
    if reports:
        print("\n".join([summary_header()] + [r.summary_row() for r in reports]))
    print(f"wrote {len(checkpoints)} checkpoint(s) to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def cmd_evaluate(args, workdir: Path) -> int:
    ck_path = _require_file(resolve(workdir, args.checkpoint), "--checkpoint")
    data_path = _require_file(resolve(workdir, args.data), "--data")
    try:
        model, extra = load_checkpoint(ck_path)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"{ck_path}: {exc}") from None
    if "norm_stats" not in extra:
        raise ConfigError(f"{ck_path} carries no normalisation statistics; refusing to evaluate raw data")
    stats = NormStats.from_dict(extra["norm_stats"])
    if stats.fingerprint() != extra.get("norm_fingerprint", stats.fingerprint()):
        raise DataError("normalisation statistics in the checkpoint are corrupted (fingerprint mismatch)")
    change_point = args.change_point if args.change_point is not None else extra.get("change_point", 600)
    runs = _load_runs(data_path, change_point)
    if runs and runs[0].n_channels != stats.mean.size:
        raise DataError(
            f"data has {runs[0].n_channels} channels but the checkpoint was normalised over {stats.mean.size}; "
            "normalisation statistics do not match this dataset"
        )
    train_ids = set(extra.get("train_run_ids", []))
    overlap = [r.run_id for r in runs if r.run_id in train_ids]
    if args.holdout_only:
        runs = [r for r in runs if r.run_id not in train_ids]
        overlap = []
    if overlap and not args.allow_train_eval:
        raise ConfigError(
            f"{len(overlap)} run(s) in {data_path.name} were used for training (e.g. {overlap[0]}); "
            "pass --holdout-only to drop them or --allow-train-eval to evaluate anyway"
        )
    if not runs:
        raise DataError("no runs left to evaluate")
    n_classes = extra.get("n_classes", model.config.n_classes)
    report = evaluate_model(model, apply_norm(runs, stats), model.config.window, n_classes,
                            describe(model.config))
    out = resolve(workdir, args.out)
    atomic_write_text(out.with_suffix(".json"), report.to_json())
    atomic_write_text(out.with_suffix(".txt"), report.to_text())
    print(report.to_text())
    return EXIT_OK


# ---------------------------------------------------------------------------
# export-graph
# ---------------------------------------------------------------------------


def cmd_export_graph(args, workdir: Path) -> int:
    ck_path = _require_file(resolve(workdir, args.checkpoint), "--checkpoint")
    model, _ = load_checkpoint(ck_path)
    try:
        mats = adjacency_matrices(model)
    except ValueError:
        raise ConfigError(
            f"{ck_path.name} holds a {model.config.kind} baseline, which has no adjacency matrix to export"
        ) from None
    out = resolve(workdir, args.out)
    for i, a in enumerate(mats):
        if args.top_k is not None:
            a = topk_sparsify(a, args.top_k)
        stem = out.name + (f"_m{i}" if len(mats) > 1 else "")
        base = out.parent / stem
        atomic_write_text(base.parent / f"{stem}_adjacency.json", a.to_json())
        atomic_write_text(base.parent / f"{stem}_adjacency.csv", a.to_csv())
        atomic_write_text(base.parent / f"{stem}_importance.csv", importance_csv(node_importance(a)))
        atomic_write_text(base.parent / f"{stem}_heatmap.csv", heatmap_csv(a))
    print(f"exported {len(mats)} adjacency matrix(es) with prefix {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# graph-quality
# ---------------------------------------------------------------------------


def cmd_graph_quality(args, workdir: Path) -> int:
    adj_path = _require_file(resolve(workdir, args.adjacency), "--adjacency")
    data_path = _require_file(resolve(workdir, args.data), "--data")
    if args.epochs < 1 or args.stride < 1:
        raise ConfigError("--epochs and --stride must be >= 1")
    try:
        adjacency = AdjacencyMatrix.load(adj_path)
    except (ValueError, KeyError) as exc:
        raise DataError(f"{adj_path}: {exc}") from None
    runs = _load_runs(data_path, args.change_point)
    n_channels = runs[0].n_channels if runs else 0
    if adjacency.n_nodes != n_channels:
        raise DataError(f"adjacency has N={adjacency.n_nodes} nodes but the dataset has N={n_channels} channels")
    data = prepare(runs, args.split, args.split_seed)
    rep_a, rep_c = graph_quality(adjacency, data, TrainConfig(args.epochs, args.lr, args.batch, args.seed),
                                 stride=args.stride, window=args.window, hidden=args.hidden)
    out = resolve(workdir, args.out)
    doc = {"version": "graphquality-v1", "window": args.window, "hidden": args.hidden,
           "rows": [rep_a.to_dict(), rep_c.to_dict()]}
    atomic_write_text(out.with_suffix(".json"), json.dumps(doc, indent=2))
    table = "\n".join([summary_header(), rep_a.summary_row(), rep_c.summary_row()]) + "\n"
    atomic_write_text(out.with_suffix(".txt"), table)
    print(table, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default=".", help="base directory for relative paths")
    common.add_argument("--config", help="flat key=value file; command-line flags override it")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="graphdiag", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"graphdiag {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset with a known graph")
    p.add_argument("--out", default="synth.csv")
    p.add_argument("--truth", default="truth.json")
    p.add_argument("--nodes", type=int, default=12)
    p.add_argument("--runs", type=int, default=20, help="runs per state")
    p.add_argument("--samples", type=int, default=800)
    p.add_argument("--change-point", type=int, default=300)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--gt-density", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a model and write checkpoint + reports")
    p.add_argument("--data")
    p.add_argument("--out", default="run")
    p.add_argument("--model", default="gnn", choices=["gnn", "ensemble", "mlp", "cnn1d"])
    p.add_argument("--graph", default="tanh_w")
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--window", type=int, default=100)
    p.add_argument("--stride", type=int, default=5, help="training window stride")
    p.add_argument("--hidden", type=int, default=1024)
    p.add_argument("--embed-dim", type=int, default=100)
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--modules", type=int, default=10)
    p.add_argument("--norm", default="node", choices=["node", "feature"])
    p.add_argument("--no-gcn-bias", action="store_true")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--split", type=float, default=0.8, help="fraction of runs per state used for training")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--train-fraction", type=float, default=1.0,
                   help="keep this fraction of the training runs of each state")
    p.add_argument("--change-point", type=int, default=600)
    p.add_argument("--no-eval", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint on held-out runs")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--out", default="report")
    p.add_argument("--change-point", type=int, default=None)
    p.add_argument("--allow-train-eval", action="store_true")
    p.add_argument("--holdout-only", action="store_true", help="skip runs the checkpoint was trained on")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-graph", parents=[common], help="export learned adjacency matrices")
    p.add_argument("--checkpoint")
    p.add_argument("--out", default="graph")
    p.add_argument("--top-k", type=int, default=None)
    p.set_defaults(func=cmd_export_graph)

    p = sub.add_parser("graph-quality", parents=[common],
                       help="compare a fixed adjacency against the correlation graph")
    p.add_argument("--adjacency")
    p.add_argument("--data")
    p.add_argument("--out", default="quality")
    p.add_argument("--window", type=int, default=QUALITY_WINDOW)
    p.add_argument("--hidden", type=int, default=QUALITY_HIDDEN)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--stride", type=int, default=5)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", type=float, default=0.8)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--change-point", type=int, default=600)
    p.set_defaults(func=cmd_graph_quality)
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    path = resolve(Path(args.workdir), args.config)
    _require_file(path, "--config")
    values = read_config_file(path)
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, raw in values.items():
        action = known.get(key)
        if action is None or key in ("config", "help"):
            raise ConfigError(f"{path}: unknown key {key!r}")
        if action.nargs == 0:
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        else:
            try:
                defaults[key] = action.type(raw) if action.type else raw
            except ValueError:
                raise ConfigError(f"{path}: bad value for {key}: {raw!r}") from None
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config_file(parser, argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args, Path(args.workdir))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
