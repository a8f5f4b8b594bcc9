"""Command line: ``ltocf {prep,train,eval,ablate}``.

Exit codes: 0 success, 1 configuration error, 2 I/O error, 3 numerical
divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, RunConfig, parse_config_text, read_config, write_config
from .evaluation import evaluate
from .graph import (
    DatasetError,
    GraphError,
    build_graph,
    load_cached,
    load_dataset,
    save_dataset_index,
    save_graph_cache,
)
from .model import CheckpointError, ModelParams, init_embeddings, load_checkpoint, save_checkpoint
from .solvers import SolverDivergence
from .training import TrainingDiverged, train, write_curves

log = logging.getLogger("ltocf")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3

CHECKPOINT_NAME = "checkpoint.ltc"
CURVES_NAME = "curves.csv"
MANIFEST_NAME = "manifest.txt"
REPORT_NAME = "report.json"

ABLATION_VALUES = {
    "solver": ["euler", "rk4", "adams-moulton", "dopri"],
    "K": ["2", "3", "4"],
    "T": ["1", "2", "3"],
    "fixed-vs-learnable": ["learnable", "fixed"],
}

# flag -> RunConfig field
_FLAGS = {
    "--train": ("train", str),
    "--test": ("test", str),
    "--cache": ("cache", str),
    "--out": ("out", str),
    "--solver": ("solver", str),
    "--step": ("step", float),
    "--rtol": ("rtol", float),
    "--atol": ("atol", float),
    "--residual": ("residual", str),
    "--operator": ("operator", str),
    "--dim": ("dim", int),
    "--k-time": ("k_time", float),
    "--t-count": ("t_count", int),
    "--lr": ("lr", float),
    "--lr-time": ("lr_time", float),
    "--lambda": ("lam", float),
    "--batch": ("batch", int),
    "--epochs": ("epochs", int),
    "--patience": ("patience", int),
    "--eval-every": ("eval_every", int),
    "--seed": ("seed", int),
    "--topk": ("topk", int),
}


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file; flags override it")
    for flag, (dest, kind) in _FLAGS.items():
        extra = {}
        if flag == "--operator":
            extra["choices"] = ["adj", "laplacian"]
        if flag == "--residual":
            extra["choices"] = ["true", "false"]
        p.add_argument(flag, dest=dest, type=kind, default=None, **extra)
    p.add_argument("--fixed-time", dest="fixed_time", action="store_true", default=None,
                   help="do not train the interior time points")
    p.add_argument("--lightgcn-mode", action="store_true",
                   help="euler, step 1, no residual, fixed t_i = i (LightGCN-equivalent)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ltocf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    prep = sub.add_parser("prep", help="parse train/test files and write the graph cache")
    prep.add_argument("--train", required=True)
    prep.add_argument("--test", required=True)
    prep.add_argument("--cache", required=True)

    tr = sub.add_parser("train", help="train a model and write checkpoint, curves and manifest")
    _add_run_flags(tr)

    ev = sub.add_parser("eval", help="evaluate a checkpoint against a cache")
    ev.add_argument("--checkpoint", required=True)
    _add_run_flags(ev)

    ab = sub.add_parser("ablate", help="grid over one axis and tabulate results")
    ab.add_argument("--axis", required=True, choices=sorted(ABLATION_VALUES))
    ab.add_argument("--values", help="comma-separated axis values (defaults per axis)")
    ab.add_argument("--parallel", type=int, default=0, help="worker processes (0 = sequential)")
    _add_run_flags(ab)
    return parser


def resolve_config(args: argparse.Namespace, default_config: Path | None = None) -> RunConfig:
    values: dict = {}
    config = getattr(args, "config", None) or default_config
    if config:
        try:
            text = Path(config).read_text(encoding="utf-8")
        except OSError as exc:
            raise DatasetError(f"cannot read config {config}: {exc}") from exc
        values.update(parse_config_text(text))
    for dest, _ in list(_FLAGS.values()) + [("fixed_time", None)]:
        value = getattr(args, dest, None)
        if value is not None:
            values[dest] = value
    if getattr(args, "lightgcn_mode", False):
        k = float(values.get("k_time", RunConfig.k_time))
        values.update(solver="euler", step=1.0, residual="false", fixed_time=True, t_count=int(k) - 1)
    return RunConfig.from_mapping(values)


def _load_data(cfg: RunConfig):
    if cfg.cache:
        return load_cached(cfg.cache, cfg.operator_kind())
    if not (cfg.train and cfg.test):
        raise ConfigError({"train/test": "either --cache or both --train and --test are required"})
    ds = load_dataset(cfg.train, cfg.test)
    return ds, build_graph(ds, cfg.operator_kind())


def initial_params(cfg: RunConfig, ds) -> ModelParams:
    e_u0, e_p0 = init_embeddings(ds.num_users, ds.num_items, cfg.dim, cfg.seed)
    return ModelParams(e_u0, e_p0, cfg.time_grid())


def run_training(cfg: RunConfig, out: Path | None = None) -> dict:
    """Train per ``cfg``; with ``out`` write manifest, checkpoint, curves and report."""
    ds, graph = _load_data(cfg)
    params = initial_params(cfg, ds)
    on_improve = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_config(cfg, out / MANIFEST_NAME)

        def on_improve(p, epoch, row):
            save_checkpoint(p, out / CHECKPOINT_NAME)

    result = train(ds, graph, cfg.train_config(), cfg.solver_config(), params, on_improve=on_improve)
    summary = {
        "recall_at_k": result.best_recall,
        "ndcg_at_k": result.best_ndcg,
        "k": cfg.topk,
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.curves),
        "users_evaluated": len(ds.test_users()),
        "wall_time_train_s": result.wall_time_train_s,
        "wall_time_infer_s": result.wall_time_infer_s,
        "t": [float(t) for t in result.params.grid.interior],
    }
    if out is not None:
        write_curves(result.curves, out / CURVES_NAME, cfg.t_count)
        (out / REPORT_NAME).write_text(json.dumps(summary, sort_keys=True) + "\n", encoding="utf-8")
    return summary


def cmd_prep(args) -> int:
    ds = load_dataset(args.train, args.test)
    graph = build_graph(ds)
    save_graph_cache(graph, args.cache)
    index = save_dataset_index(ds, args.cache)
    print(json.dumps({
        "cache": str(args.cache),
        "index": str(index),
        "num_users": ds.num_users,
        "num_items": ds.num_items,
        "train_edges": ds.num_train,
        "test_edges": sum(len(v) for v in ds.test_edges_by_user.values()),
        "nnz_total": graph.adj_u_from_p.nnz + graph.adj_p_from_u.nnz,
    }))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    summary = run_training(cfg, Path(cfg.out))
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    # a checkpoint written by train sits next to its manifest; use it as the base
    manifest = Path(args.checkpoint).parent / MANIFEST_NAME
    cfg = resolve_config(args, manifest if manifest.is_file() else None)
    params = load_checkpoint(args.checkpoint, learnable=not cfg.fixed_time)
    ds, graph = _load_data(cfg)
    try:
        params.check_graph(graph)
    except GraphError as exc:
        raise GraphError(f"checkpoint {args.checkpoint} vs data {cfg.cache or cfg.train}: {exc}") from None
    report = evaluate(params, graph, ds, cfg.solver_config(), k=cfg.topk)
    print(report.to_json())
    return EXIT_OK


def _ablation_config(cfg: RunConfig, axis: str, value: str) -> RunConfig:
    if axis == "solver":
        return replace(cfg, solver=value, step=None if value != cfg.solver else cfg.step)
    if axis == "K":
        return replace(cfg, k_time=float(value))
    if axis == "T":
        return replace(cfg, t_count=int(value))
    if value not in ("learnable", "fixed"):
        raise ValueError(f"fixed-vs-learnable value must be learnable or fixed, got {value!r}")
    # the two runs differ only in lr_time
    return replace(cfg, fixed_time=False, lr_time=cfg.lr_time if value == "learnable" else 0.0)


def _ablation_run(cfg: RunConfig, axis: str, value: str) -> dict:
    row = {"axis": axis, "value": value, "solver": "", "k_time": "", "t_count": "", "lr_time": "",
           "recall": "", "ndcg": "", "wall_time_train_s": "", "wall_time_infer_s": "", "status": "ok", "error": ""}
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            run_cfg = _ablation_config(cfg, axis, value)
            run_cfg.validate()
        row.update(solver=run_cfg.solver, k_time=run_cfg.k_time, t_count=run_cfg.t_count, lr_time=run_cfg.lr_time)
        summary = run_training(run_cfg)
        row.update(recall=summary["recall_at_k"], ndcg=summary["ndcg_at_k"],
                   wall_time_train_s=summary["wall_time_train_s"], wall_time_infer_s=summary["wall_time_infer_s"])
    except Exception as exc:  # recorded per row; remaining runs continue
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    return row


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    values = args.values.split(",") if args.values else ABLATION_VALUES[args.axis]
    if args.parallel and args.parallel > 1:
        with ProcessPoolExecutor(args.parallel) as pool:
            rows = list(pool.map(_ablation_run, [cfg] * len(values), [args.axis] * len(values), values))
    else:
        rows = [_ablation_run(cfg, args.axis, v) for v in values]
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / MANIFEST_NAME)
    path = out / f"ablation_{args.axis}.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    print(path)
    return EXIT_OK


COMMANDS = {"prep": cmd_prep, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, CheckpointError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SolverDivergence, TrainingDiverged) as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (GraphError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
