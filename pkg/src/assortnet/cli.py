"""Command-line entry point: ``assortnet {generate,train,evaluate,reproduce,inspect}``.

Outputs go under ``--out`` or, when that is omitted, under the directory
named by ``ASSORTNET_OUT`` (default ``runs``).  The exit code is 0 only if
every step (every cell, for ``reproduce``) succeeded.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from assortnet.classical import choice_probs, load_classical
from assortnet.core import load_dataset, validate_dataset
from assortnet.evaluation import (
    accuracy,
    ace,
    calibration_bins,
    ce_loss,
    clamp_count,
    delta_u,
    write_calibration_csv,
    write_delta_u_csv,
)
from assortnet.experiments import (
    METHODS,
    PIPELINES,
    ConfigError,
    fit_method,
    generate,
    load_config,
    load_fitted,
    make_config,
    reproduce,
    uniform_ce,
    versions,
    write_fit_outputs,
)
from assortnet.training import TrainConfig

log = logging.getLogger("assortnet")

OUT_ENV = "ASSORTNET_OUT"
METRICS = ("ce", "accuracy", "ace")


def output_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def _json_arg(text: str | None) -> dict:
    """Inline JSON object or a path to a JSON file."""
    if not text:
        return {}
    path = Path(text)
    body = json.loads(path.read_text()) if path.exists() else json.loads(text)
    if not isinstance(body, dict):
        raise ConfigError(f"expected a JSON object, got {type(body).__name__}")
    return body


def _write_json(path: Path, body: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(body, indent=1, default=str) + "\n")


def _experiment_config(args):
    overrides = {"seed": args.seed, "trials": args.trials}
    if args.config:
        return load_config(args.config, **overrides)
    pipeline = getattr(args, "pipeline", None)
    if not pipeline:
        raise ConfigError("give a pipeline id or --config")
    return make_config(pipeline, **{k: v for k, v in overrides.items() if v is not None})


# --- subcommands -------------------------------------------------------------------------

def cmd_generate(args) -> int:
    config = _experiment_config(args)
    out = Path(args.out) if args.out else output_root() / f"data-{config.pipeline}-seed{config.seed}"
    dirs = generate(config, out)
    print(json.dumps({"out": str(out), "directories": len(dirs)}))
    return 0


def cmd_train(args) -> int:
    train_set = load_dataset(args.train)
    val_set = load_dataset(args.val)
    spec = _json_arg(args.spec)
    train_cfg = TrainConfig.defaults(**_json_arg(args.config))
    seed = train_cfg.seed if args.seed is None else args.seed
    donor = None
    if args.warm_start:
        donor = load_fitted(args.warm_start)
        if donor.method != args.method:
            raise ConfigError(f"donor is a {donor.method} model, cannot warm-start {args.method}")
    fitted = fit_method(args.method, spec, train_set, val_set, train_cfg, seed, donor=donor.model if donor else None)
    out = Path(args.out) if args.out else output_root() / f"train-{args.method}-seed{seed}"
    write_fit_outputs(fitted, out)
    manifest = {
        "method": args.method,
        "spec": spec,
        "train_config": train_cfg.__dict__,
        "seed": seed,
        "train": str(args.train),
        "val": str(args.val),
        "warm_start": str(args.warm_start) if args.warm_start else None,
        "info": {k: v for k, v in fitted.info.items() if k != "em_state"},
        "versions": versions(),
    }
    _write_json(out / "manifest.json", manifest)
    print(json.dumps({"out": str(out), **manifest["info"]}))
    return 0


def cmd_evaluate(args) -> int:
    test = load_dataset(args.test)
    arr = test.arrays
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = [m for m in metrics if m not in METRICS]
    if bad:
        raise ConfigError(f"unknown metric(s) {bad}; choose from {list(METRICS)}")
    out = Path(args.out) if args.out else None
    report: dict = {"test": str(args.test), "observations": arr.m}

    def score(name: str, probs: np.ndarray) -> dict:
        row = {}
        if "ce" in metrics:
            row["ce"] = ce_loss(probs, arr.choices)
            row["ce_clamped"] = clamp_count(probs, arr.choices)
        if "accuracy" in metrics:
            row["accuracy"] = accuracy(probs, arr.choices)
        if "ace" in metrics:
            row["ace"] = ace(probs, arr.choices, arr.offered, args.bins)
        if out is not None:
            write_calibration_csv(calibration_bins(probs, arr.choices, arr.offered, args.bins),
                                  out / f"calibration_{name}.csv")
        return row

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if args.model:
        fitted = load_fitted(args.model)
        report["model"] = score("model", fitted.predict(arr))
        if args.delta_u:
            hist = delta_u(fitted.model, arr, args.delta_u_samples, np.random.default_rng(args.seed or 0))
            report["delta_u"] = {"skipped": hist.skipped, "counts": hist.counts.tolist(),
                                 "edges": hist.edges.tolist()}
            if out is not None:
                write_delta_u_csv(hist, out / "delta_u.csv")
    if args.oracle:
        report["oracle"] = score("oracle", choice_probs(load_classical(args.oracle), arr.offered))
    if args.uniform:
        report["uniform"] = {"ce": uniform_ce(arr)}
    if len(report) == 2:
        raise ConfigError("nothing to evaluate: give --model, --oracle or --uniform")
    if out is not None:
        _write_json(out / "report.json", report)
    print(json.dumps(report, indent=1))
    return 0


def cmd_reproduce(args) -> int:
    config = _experiment_config(args)
    out = Path(args.out) if args.out else output_root() / f"{config.pipeline}-seed{config.seed}"
    result = reproduce(config, out, jobs=args.jobs)
    print(json.dumps({"out": str(out), "cells_failed": len(result.failures), "results": str(out / "results.csv")}))
    for f in result.failures:
        print(f"FAILED cell {f['cell']}: {f['error']}", file=sys.stderr)
    return 0 if result.ok else 1


def _inspect_dataset(path: Path) -> dict:
    ds = load_dataset(path)
    arr = ds.arrays
    sizes = Counter(arr.offered.sum(axis=1).astype(int).tolist())
    return {
        "kind": "dataset",
        "n": ds.n,
        "observations": len(ds),
        "no_purchase_index": ds.universe.no_purchase_index,
        "assortment_sizes": dict(sorted(sizes.items())),
        "choice_counts": np.bincount(arr.choices, minlength=ds.n).tolist(),
        "customer_features": None if arr.customer is None else arr.customer.shape[1],
        "product_features": None if arr.product is None else arr.product.shape[-1],
        "violations": validate_dataset(ds),
    }


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if path.is_dir():
        manifest = path / "manifest.json"
        if not manifest.exists():
            raise ConfigError(f"{path}: no manifest.json")
        body = json.loads(manifest.read_text())
    elif path.suffix == ".jsonl":
        body = _inspect_dataset(path)
    else:
        raw = json.loads(path.read_text())
        fitted = load_fitted(path)
        body = {"kind": "model", "method": fitted.method}
        if "arch" in raw:
            body["arch"] = raw["arch"]
            body["parameters"] = int(sum(p.value.size for p in fitted.model.params))
        else:
            body["n"] = int(np.asarray(raw.get("utilities", raw.get("arrival", raw.get("beta", [])))).shape[0])
    print(json.dumps(body, indent=1, default=str))
    return 0


# --- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="assortnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment_flags(p):
        p.add_argument("pipeline", nargs="?", choices=PIPELINES, help="pipeline id (or use --config)")
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--seed", type=int, help="experiment seed (overrides the config)")
        p.add_argument("--trials", type=int, help="number of trials (overrides the config)")
        p.add_argument("--out", help=f"output directory (default under ${OUT_ENV})")

    p = sub.add_parser("generate", help="write synthetic datasets and true models")
    experiment_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="fit one model on a dataset")
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--train", required=True, help="training dataset (.jsonl)")
    p.add_argument("--val", required=True, help="validation dataset (.jsonl)")
    p.add_argument("--spec", help="model spec as inline JSON or a JSON file")
    p.add_argument("--config", help="training config overrides as inline JSON or a JSON file")
    p.add_argument("--seed", type=int)
    p.add_argument("--warm-start", help="donor model file for parameter transplant")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a model on a test dataset")
    p.add_argument("--test", required=True)
    p.add_argument("--model")
    p.add_argument("--oracle", help="true-model file; adds an oracle row")
    p.add_argument("--uniform", action="store_true", help="add the uniform-over-assortment row")
    p.add_argument("--metrics", default="ce,accuracy,ace")
    p.add_argument("--bins", type=int, default=25, help="calibration bins per product")
    p.add_argument("--delta-u", action="store_true", help="layer-effect histogram (feature nets only)")
    p.add_argument("--delta-u-samples", type=int, default=200)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("reproduce", help="run a full pipeline and aggregate over trials")
    experiment_flags(p)
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("inspect", help="summarize a dataset, model file or run directory")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError, ValueError) as exc:
        print(f"assortnet {args.command}: error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1


if __name__ == "__main__":
    sys.exit(main())
