"""Config-driven experiment pipelines.

A pipeline expands an :class:`ExperimentConfig` into independent cells
(one per trial and data-generating case).  Each cell regenerates its data
from ``trial_rng(seed, trial, case)``, fits every requested method and
returns flat result rows, so any cell can be re-run alone and cells can be
farmed out to a process pool.  :func:`reproduce` aggregates the rows over
trials and writes CSV tables plus a manifest.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np
import scipy

import assortnet
from assortnet.classical import (
    MccmModel,
    choice_probs,
    load_classical,
    save_classical,
)
from assortnet.core import ChoiceArrays, ChoiceDataset, ProductUniverse, split_dataset
from assortnet.datagen import (
    AssortmentDistribution,
    FeatureModelConfig,
    MccmGenConfig,
    gen_feature_models,
    gen_mccm_clustered,
    gen_mccm_plain,
    gen_mnl,
    gen_np,
    gen_offer_matrix,
    sample_dataset,
    shrink_mccm,
    trial_rng,
)
from assortnet.estimators import fit_mccm_em, fit_mnl_f_mle, fit_mnl_mle, mnl_f_probs, write_em_trace
from assortnet.evaluation import accuracy, ace, ce_loss
from assortnet.neural import (
    EncoderSpec,
    GasnSpec,
    RasnSpec,
    build_deepmnl,
    build_gasn,
    build_gasn_f,
    build_rasn,
    build_rasn_f,
    build_tastenet,
    load_model,
    save_model,
    warm_start_transplant,
)
from assortnet.training import TrainConfig, predict, train, write_history

log = logging.getLogger(__name__)

PIPELINES = ("table1", "table2", "table6", "warmstart", "realdata", "custom")
NEURAL = ("gasn", "rasn", "gasn_f", "rasn_f", "tastenet", "deepmnl")
CLASSICAL = ("mnl_mle", "mccm_em", "mnl_f_mle")
METHODS = NEURAL + CLASSICAL


class ConfigError(ValueError):
    pass


# --- configuration -------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    pipeline: str
    trials: int = 3
    seed: int = 0
    params: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"pipeline: unknown id {self.pipeline!r} (expected one of {list(PIPELINES)})")
        if int(self.trials) < 1:
            raise ConfigError(f"trials: must be at least 1, got {self.trials}")
        for m in self.params.get("methods", []):
            if m not in METHODS:
                raise ConfigError(f"params.methods: unknown method {m!r}")
        try:
            self.train_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train: {exc}") from exc

    def train_config(self) -> TrainConfig:
        return TrainConfig.defaults(**self.train)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def pipeline_defaults(pipeline: str) -> dict:
    if pipeline == "custom":
        return {}
    text = resources.files("assortnet").joinpath(f"configs/{pipeline}.json").read_text()
    return json.loads(text)


def make_config(pipeline: str, **overrides) -> ExperimentConfig:
    """Packaged defaults for ``pipeline`` with top-level and ``params`` overrides."""
    body = pipeline_defaults(pipeline)
    body["pipeline"] = pipeline
    params = dict(body.get("params", {}))
    params.update(overrides.pop("params", {}))
    body["params"] = params
    body.update(overrides)
    return _config_from_body(body, "<defaults>")


def _config_from_body(body: dict, source: str) -> ExperimentConfig:
    if not isinstance(body, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    allowed = {"pipeline", "trials", "seed", "params", "train"}
    unknown = sorted(set(body) - allowed)
    if unknown:
        raise ConfigError(f"{source}: unknown field(s) {unknown}")
    if "pipeline" not in body:
        raise ConfigError(f"{source}: missing field 'pipeline'")
    return ExperimentConfig(**body)


def load_config(path: str | Path, **overrides) -> ExperimentConfig:
    """Read a JSON experiment config; pipeline defaults fill missing params."""
    path = Path(path)
    try:
        body = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(body, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    pipeline = body.get("pipeline")
    if pipeline not in PIPELINES:
        raise ConfigError(f"{path}: field 'pipeline' must be one of {list(PIPELINES)}, got {pipeline!r}")
    base = pipeline_defaults(pipeline)
    merged = {**base, **body}
    merged["params"] = {**base.get("params", {}), **body.get("params", {})}
    merged["train"] = {**base.get("train", {}), **body.get("train", {})}
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return _config_from_body(merged, str(path))


def net_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])


# --- true models and data ------------------------------------------------------------

def make_truth(kind: str, p: dict, rng: np.random.Generator):
    n = p["n"]
    if kind == "mnl":
        return gen_mnl(n, rng)
    if kind == "mccm":
        return gen_mccm_clustered(MccmGenConfig(n, p["sigma"], p["c_num"]), rng)
    if kind == "mccm_plain":
        return gen_mccm_plain(n, rng)
    if kind == "np":
        return gen_np(n, p["n_perm"], rng)
    if kind in ("mnl_f", "mccm_f"):
        return gen_feature_models(FeatureModelConfig(n, p["d"], kind[:-2], p.get("arrival", "features")), rng)
    raise ConfigError(f"params.truths: unknown truth {kind!r}")


def _classical(truth):
    return getattr(truth, "model", truth)


def synthetic_splits(p: dict, seed: int, trial: int, case: int, truth_kind: str):
    """True model plus (train pool, val, test) for one synthetic cell."""
    rng = trial_rng(seed, trial, case)
    truth = make_truth(truth_kind, p, rng)
    pool = max(p["sizes"])
    total = pool + p["val"] + p["test"]
    off = gen_offer_matrix(AssortmentDistribution(p.get("assortments", "D1"), p["n"]), total, rng)
    ds = sample_dataset(truth, off, rng)
    tr, va, te = split_dataset(ds, (pool, p["val"], p["test"]), net_seed(seed, trial, case, 1))
    return truth, tr, va, te


# --- methods ----------------------------------------------------------------------------

def _encoder(spec: dict, arr: ChoiceArrays) -> EncoderSpec:
    d = arr.product.shape[-1]
    d_cust = 1 if arr.customer is None else arr.customer.shape[1]
    return EncoderSpec(d, d_cust, tuple(spec.get("product_layers", (d, 1))), tuple(spec.get("customer_layers", (1,))))


def build_network(method: str, spec: dict, n: int, arr: ChoiceArrays, seed: int):
    if method == "gasn":
        return build_gasn(GasnSpec(n, tuple(spec.get("hidden", (n,)))), seed)
    if method == "rasn":
        return build_rasn(RasnSpec(n, spec.get("blocks", 2), spec.get("block_hidden")), seed)
    if arr.product is None:
        raise ConfigError(f"{method} needs product features")
    if method == "gasn_f":
        return build_gasn_f(GasnSpec(n, tuple(spec.get("hidden", (n,)))), _encoder(spec, arr), seed,
                            spec.get("masked_input", True))
    if method == "rasn_f":
        return build_rasn_f(RasnSpec(n, spec.get("blocks", 1), spec.get("block_hidden")), _encoder(spec, arr), seed)
    d = arr.product.shape[-1]
    d_cust = 1 if arr.customer is None else arr.customer.shape[1]
    if method == "tastenet":
        return build_tastenet(n, d, d_cust, tuple(spec.get("widths", (100,))), seed)
    if method == "deepmnl":
        return build_deepmnl(n, d, d_cust, tuple(spec.get("widths", (100,))), seed)
    raise ConfigError(f"unknown network {method!r}")


@dataclass
class Fitted:
    """A fitted model of any family with a uniform prediction interface."""

    method: str
    model: object
    history: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    def predict(self, data: ChoiceDataset | ChoiceArrays) -> np.ndarray:
        arr = data.arrays if isinstance(data, ChoiceDataset) else data
        if self.method in NEURAL:
            return predict(self.model, arr)
        if self.method == "mnl_f_mle":
            return mnl_f_probs(self.model, arr)
        return choice_probs(self.model, arr.offered)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        if self.method in NEURAL:
            save_model(self.model, path)
        elif self.method == "mnl_f_mle":
            path.write_text(json.dumps({"format_version": 1, "kind": "mnl_f", "beta": self.model.tolist()}))
        else:
            save_classical(self.model, path)


def load_fitted(path: str | Path) -> Fitted:
    body = json.loads(Path(path).read_text())
    if "arch" in body:
        graph = load_model(path)
        return Fitted(graph.arch["kind"], graph)
    if body.get("kind") == "mnl_f":
        return Fitted("mnl_f_mle", np.array(body["beta"], dtype=float))
    model = load_classical(path)
    return Fitted("mccm_em" if isinstance(model, MccmModel) else "mnl_mle", model)


def fit_method(
    method: str,
    spec: dict,
    tr: ChoiceDataset,
    va: ChoiceDataset,
    train_cfg: TrainConfig,
    seed: int,
    donor=None,
) -> Fitted:
    if method == "mnl_mle":
        return Fitted(method, fit_mnl_mle(tr))
    if method == "mnl_f_mle":
        return Fitted(method, fit_mnl_f_mle(tr))
    if method == "mccm_em":
        state = fit_mccm_em(tr, init_seed=seed, tolerance=spec.get("tolerance", 1e-4),
                            max_iter=spec.get("max_iter", 500))
        return Fitted(method, state.current, info={"em_iterations": state.iteration, "em_state": state})
    graph = build_network(method, spec, tr.n, tr.arrays, seed)
    if donor is not None:
        warm_start_transplant(donor, graph)
    graph, history = train(graph, tr, va, TrainConfig(**{**asdict(train_cfg), "seed": seed}))
    return Fitted(method, graph, history, {"epochs": len(history)})


def uniform_ce(arr: ChoiceArrays) -> float:
    return float(np.mean(np.log(arr.offered.sum(axis=1))))


# --- cells -------------------------------------------------------------------------------

@dataclass(frozen=True)
class Cell:
    pipeline: str
    trial: int
    case: int
    label: str


def _row(cell: Cell, **kw) -> dict:
    return {"trial": cell.trial, **kw}


def _synthetic_cell(config: ExperimentConfig, cell: Cell) -> list[dict]:
    p = config.params
    truth_kind = p["truths"][cell.case]
    truth, pool, va, te = synthetic_splits(p, config.seed, cell.trial, cell.case, truth_kind)
    arr = te.arrays
    rows = [
        _row(cell, truth=truth_kind, method="oracle", m="", ce=ce_loss(choice_probs(_classical(truth), arr.offered), arr.choices)),
        _row(cell, truth=truth_kind, method="uniform", m="", ce=uniform_ce(arr)),
    ]
    cfg = config.train_config()
    for m in p["sizes"]:
        tr = pool.subset(range(m))
        for k, method in enumerate(p["methods"]):
            t0 = time.perf_counter()
            fitted = fit_method(method, p.get("models", {}).get(method, {}), tr, va, cfg,
                                net_seed(config.seed, cell.trial, cell.case, k))
            rows.append(_row(cell, truth=truth_kind, method=method, m=m, ce=ce_loss(fitted.predict(arr), arr.choices),
                             seconds=round(time.perf_counter() - t0, 2)))
    return rows


def _synthetic_cells(config: ExperimentConfig) -> list[Cell]:
    return [Cell(config.pipeline, t, c, truth) for t in range(config.trials) for c, truth in enumerate(config.params["truths"])]


def table6_data(p: dict, seed: int, trial: int):
    """The plain MCCM and per-distribution (train, val, test) splits plus the mix."""
    rng = trial_rng(seed, trial, 0)
    truth = gen_mccm_plain(p["n"], rng)
    splits = {}
    for k, kind in enumerate(p["distributions"]):
        drng = trial_rng(seed, trial, 1 + k)
        off = gen_offer_matrix(AssortmentDistribution(kind, p["n"]), p["m"] + p["val"] + p["test"], drng)
        ds = sample_dataset(truth, off, drng)
        splits[kind] = split_dataset(ds, (p["m"], p["val"], p["test"]), net_seed(seed, trial, k, 1))
    q, qv = p["m"] // len(splits), p["val"] // len(splits)
    mix_tr = ChoiceDataset(ProductUniverse(p["n"]), tuple(o for tr, _, _ in splits.values() for o in tr.observations[:q]))
    mix_va = ChoiceDataset(ProductUniverse(p["n"]), tuple(o for _, va, _ in splits.values() for o in va.observations[:qv]))
    return truth, splits, (mix_tr, mix_va)


def _table6_labels(p: dict) -> list[str]:
    return list(p["distributions"]) + ["Mix"]


def _table6_cell(config: ExperimentConfig, cell: Cell) -> list[dict]:
    p = config.params
    truth, splits, mix = table6_data(p, config.seed, cell.trial)
    rows = []
    if cell.label == "Oracle":
        for kind, (_, _, te) in splits.items():
            arr = te.arrays
            rows.append(_row(cell, train="Oracle", test=kind, ce=ce_loss(choice_probs(truth, arr.offered), arr.choices)))
        return rows
    tr, va = mix if cell.label == "Mix" else splits[cell.label][:2]
    fitted = fit_method("gasn", p.get("models", {}).get("gasn", {}), tr, va, config.train_config(),
                        net_seed(config.seed, cell.trial, cell.case))
    for kind, (_, _, te) in splits.items():
        arr = te.arrays
        rows.append(_row(cell, train=cell.label, test=kind, ce=ce_loss(fitted.predict(arr), arr.choices)))
    return rows


def _table6_cells(config: ExperimentConfig) -> list[Cell]:
    labels = _table6_labels(config.params) + ["Oracle"]
    return [Cell("table6", t, c, lab) for t in range(config.trials) for c, lab in enumerate(labels)]


def warmstart_data(p: dict, seed: int, trial: int):
    """D-augment (n_aug products, no-purchase at 0) and its shrunk counterpart."""
    rng = trial_rng(seed, trial, 0)
    n_aug, n_keep = p["n_augment"], p["n_shrink"]
    truth = gen_mccm_plain(n_aug, rng)
    small = shrink_mccm(truth, n_keep, 0)
    out = {}
    for name, model, n in (("augment", truth, n_aug), ("shrink", small, n_keep)):
        drng = trial_rng(seed, trial, 1 if name == "augment" else 2)
        sizes = (p["m_large"], p["val"], p["test"])
        dist = AssortmentDistribution("D1", n, include_no_purchase=True, no_purchase_index=0)
        off = gen_offer_matrix(dist, sum(sizes), drng)
        ds = sample_dataset(model, off, drng, no_purchase_index=0)
        out[name] = split_dataset(ds, sizes, net_seed(seed, trial, 3, n))
    return truth, small, out


def _warmstart_cell(config: ExperimentConfig, cell: Cell) -> list[dict]:
    p = config.params
    _, _, data = warmstart_data(p, config.seed, cell.trial)
    method = cell.label
    spec = p.get("models", {}).get(method, {})
    cfg = config.train_config()
    seed = net_seed(config.seed, cell.trial, cell.case)
    s_tr, s_va, _ = data["shrink"]
    donor = fit_method(method, spec, s_tr, s_va, cfg, seed)
    a_pool, a_va, a_te = data["augment"]
    rows = []
    for m in p["sizes"]:
        tr = a_pool.subset(range(m))
        for start in ("cold", "warm"):
            fresh_seed = net_seed(config.seed, cell.trial, cell.case, m)
            fitted = fit_method(method, spec, tr, a_va, cfg, fresh_seed,
                                donor=donor.model if start == "warm" else None)
            vals = [h.val_ce for h in fitted.history]
            rows.append(_row(cell, method=method, m=m, start=start, final_val_ce=min(vals),
                             test_ce=ce_loss(fitted.predict(a_te), a_te.arrays.choices), epochs=len(vals),
                             curve=json.dumps([round(v, 6) for v in vals])))
    return rows


def _warmstart_cells(config: ExperimentConfig) -> list[Cell]:
    methods = config.params["methods"]
    return [Cell("warmstart", t, c, m) for t in range(config.trials) for c, m in enumerate(methods)]


def standardize(train_set: ChoiceDataset, *others: ChoiceDataset) -> list[ChoiceDataset]:
    """Z-score customer and product features with training statistics.

    Product statistics use offered entries only, and unoffered entries stay
    at zero so the zero-fill convention survives.
    """
    arr = train_set.arrays
    stats = {}
    if arr.customer is not None:
        mu, sd = arr.customer.mean(axis=0), arr.customer.std(axis=0)
        stats["customer"] = (mu, np.where(sd > 0, sd, 1.0))
    if arr.product is not None:
        block = arr.product_block(slice(None))
        offered = arr.offered > 0
        vals = block[offered]
        mu, sd = vals.mean(axis=0), vals.std(axis=0)
        stats["product"] = (mu, np.where(sd > 0, sd, 1.0))
    out = []
    for ds in (train_set, *others):
        a = ds.arrays
        cust = None if a.customer is None else (a.customer - stats["customer"][0]) / stats["customer"][1]
        prod = None
        if a.product is not None:
            block = a.product_block(slice(None))
            prod = np.where(a.offered[..., None] > 0, (block - stats["product"][0]) / stats["product"][1], 0.0)
        out.append(ChoiceDataset.from_arrays(ds.universe, a.offered, a.choices, cust, prod,
                                             no_purchase_always_offered=ds.no_purchase_always_offered,
                                             meta=dict(ds.meta)))
    return out


def load_real(p: dict) -> ChoiceDataset:
    from assortnet import ingest

    kind = p["dataset"]
    if kind == "swissmetro":
        return ingest.load_swissmetro(p["path"])
    if kind == "expedia":
        return ingest.load_expedia(p["path"])
    if kind == "hotel":
        return ingest.load_hotel(p["path"], p["hotel_id"], p.get("rare_threshold", ingest.DEFAULT_RARE_THRESHOLD))
    raise ConfigError(f"params.dataset: unknown dataset {kind!r}")


def _realdata_cell(config: ExperimentConfig, cell: Cell) -> list[dict]:
    p = config.params
    ds = load_real(p)
    sizes = tuple(p["splits"])
    tr, va, te = split_dataset(ds, sizes, net_seed(config.seed, cell.trial))
    if p.get("standardize", True) and (tr.arrays.customer is not None or tr.arrays.product is not None):
        tr, va, te = standardize(tr, va, te)
    cfg = config.train_config()
    rows = []
    arr = te.arrays
    rows.append(_row(cell, dataset=p["dataset"], method="uniform", ce=uniform_ce(arr), accuracy="", ace=""))
    for k, method in enumerate(p["methods"]):
        fitted = fit_method(method, p.get("models", {}).get(method, {}), tr, va, cfg,
                            net_seed(config.seed, cell.trial, k))
        probs = fitted.predict(arr)
        rows.append(_row(cell, dataset=p["dataset"], method=method, ce=ce_loss(probs, arr.choices),
                         accuracy=accuracy(probs, arr.choices),
                         ace=ace(probs, arr.choices, arr.offered, p.get("ace_bins", 25))))
    return rows


def _realdata_cells(config: ExperimentConfig) -> list[Cell]:
    return [Cell("realdata", t, 0, config.params["dataset"]) for t in range(config.trials)]


_CELLS: dict[str, tuple[Callable, Callable]] = {
    "table1": (_synthetic_cells, _synthetic_cell),
    "table2": (_synthetic_cells, _synthetic_cell),
    "custom": (_synthetic_cells, _synthetic_cell),
    "table6": (_table6_cells, _table6_cell),
    "warmstart": (_warmstart_cells, _warmstart_cell),
    "realdata": (_realdata_cells, _realdata_cell),
}


def expand_cells(config: ExperimentConfig) -> list[Cell]:
    return _CELLS[config.pipeline][0](config)


def run_cell(config: ExperimentConfig, cell: Cell) -> dict:
    """Run one cell, capturing failures instead of raising."""
    t0 = time.perf_counter()
    try:
        rows = _CELLS[config.pipeline][1](config, cell)
        return {"cell": asdict(cell), "status": "ok", "rows": rows, "seconds": time.perf_counter() - t0}
    except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the run
        log.error("cell %s failed: %s", cell, exc)
        return {"cell": asdict(cell), "status": "failed", "rows": [], "error": f"{type(exc).__name__}: {exc}",
                "traceback": traceback.format_exc(), "seconds": time.perf_counter() - t0}


def _run_cell_args(args):
    return run_cell(*args)


def run_cells(config: ExperimentConfig, cells: list[Cell], jobs: int = 1) -> list[dict]:
    if jobs <= 1 or len(cells) <= 1:
        return [run_cell(config, c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_cell_args, [(config, c) for c in cells]))


# --- aggregation ------------------------------------------------------------------------

_KEYS = {
    "table1": ("truth", "method", "m"),
    "table2": ("truth", "method", "m"),
    "custom": ("truth", "method", "m"),
    "table6": ("train", "test"),
    "warmstart": ("method", "m", "start"),
    "realdata": ("dataset", "method"),
}
_VALUES = {
    "warmstart": ("final_val_ce", "test_ce", "epochs"),
    "realdata": ("ce", "accuracy", "ace"),
}


def aggregate(pipeline: str, rows: list[dict]) -> list[dict]:
    """Mean, standard deviation and median over trials for each key."""
    keys = _KEYS[pipeline]
    values = _VALUES.get(pipeline, ("ce",))
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    out = []
    for key, members in groups.items():
        rec = dict(zip(keys, key))
        rec["trials"] = len(members)
        for v in values:
            xs = np.array([float(r[v]) for r in members if r.get(v, "") != ""])
            if len(xs) == 0:
                rec.update({f"{v}_mean": "", f"{v}_std": "", f"{v}_median": ""})
                continue
            rec[f"{v}_mean"] = float(xs.mean())
            rec[f"{v}_std"] = float(xs.std(ddof=1)) if len(xs) > 1 else 0.0
            rec[f"{v}_median"] = float(np.median(xs))
        out.append(rec)
    return out


def lookup(table: list[dict], **key) -> dict:
    hits = [r for r in table if all(str(r.get(k)) == str(v) for k, v in key.items())]
    if len(hits) != 1:
        raise KeyError(f"{key}: {len(hits)} matching rows")
    return hits[0]


def write_rows(rows: list[dict], path: str | Path) -> None:
    fields: list[str] = []
    for r in rows:
        fields += [k for k in r if k not in fields]
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def versions() -> dict:
    return {"assortnet": assortnet.__version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


@dataclass
class ReproduceResult:
    out_dir: Path
    rows: list[dict]
    table: list[dict]
    failures: list[dict]

    @property
    def ok(self) -> bool:
        return not self.failures


def reproduce(config: ExperimentConfig, out_dir: str | Path, jobs: int = 1) -> ReproduceResult:
    """Run every cell of a pipeline and write ``rows.csv``, ``results.csv``
    and ``manifest.json`` (plus ``curves.csv`` for the warm-start runs)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = expand_cells(config)
    results = run_cells(config, cells, jobs)
    rows = [r for res in results for r in res["rows"]]
    failures = [res for res in results if res["status"] != "ok"]
    table = aggregate(config.pipeline, rows)
    if config.pipeline == "warmstart":
        write_rows([{k: v for k, v in r.items() if k != "curve"} for r in rows], out_dir / "rows.csv")
        _write_curves(rows, out_dir)
    else:
        write_rows(rows, out_dir / "rows.csv")
    write_rows(table, out_dir / "results.csv")
    manifest = {
        "config": config.to_dict(),
        "config_hash": config.digest(),
        "seed": config.seed,
        "versions": versions(),
        "cells": [{k: v for k, v in res.items() if k != "rows"} for res in results],
        "failed_cells": len(failures),
    }
    if config.pipeline == "table1":
        manifest["assortment_distribution"] = config.params.get("assortments", "D1")
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, default=str) + "\n")
    return ReproduceResult(out_dir, rows, table, failures)


def _write_curves(rows: list[dict], out_dir: Path) -> None:
    by_m: dict[int, list[dict]] = {}
    for r in rows:
        for epoch, v in enumerate(json.loads(r["curve"]), 1):
            by_m.setdefault(r["m"], []).append(
                {"trial": r["trial"], "method": r["method"], "start": r["start"], "epoch": epoch, "val_ce": v})
    for m, recs in by_m.items():
        write_rows(recs, out_dir / f"curves_m{m}.csv")


# --- data generation for the CLI --------------------------------------------------------

def generate(config: ExperimentConfig, out_dir: str | Path) -> list[Path]:
    """Write every trial's datasets and true model; returns the directories."""
    from assortnet.core import save_dataset

    out_dir = Path(out_dir)
    p = config.params
    written = []

    def dump(d: Path, model, splits: dict[str, ChoiceDataset]):
        d.mkdir(parents=True, exist_ok=True)
        for name, ds in splits.items():
            save_dataset(ds, d / f"{name}.jsonl")
        save_classical(_classical(model), d / "true_model.json")
        written.append(d)

    for t in range(config.trials):
        tdir = out_dir / f"trial_{t}"
        if config.pipeline in ("table1", "table2", "custom"):
            for c, kind in enumerate(p["truths"]):
                truth, pool, va, te = synthetic_splits(p, config.seed, t, c, kind)
                splits = {f"train_m{m}": pool.subset(range(m)) for m in p["sizes"]}
                dump(tdir / kind, truth, {**splits, "val": va, "test": te})
        elif config.pipeline == "table6":
            truth, splits, (mix_tr, mix_va) = table6_data(p, config.seed, t)
            for kind, (tr, va, te) in splits.items():
                dump(tdir / kind, truth, {"train": tr, "val": va, "test": te})
            dump(tdir / "Mix", truth, {"train": mix_tr, "val": mix_va})
        elif config.pipeline == "warmstart":
            truth, small, data = warmstart_data(p, config.seed, t)
            for name, model in (("augment", truth), ("shrink", small)):
                tr, va, te = data[name]
                dump(tdir / name, model, {"train": tr, "val": va, "test": te})
        else:
            raise ConfigError(f"generate does not apply to pipeline {config.pipeline!r}")
    manifest = {"config": config.to_dict(), "config_hash": config.digest(), "versions": versions(),
                "directories": [str(d.relative_to(out_dir)) for d in written]}
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return written


def write_em_outputs(fitted: Fitted, out_dir: Path) -> None:
    state = fitted.info.get("em_state")
    if state is not None:
        write_em_trace(state, out_dir / "em_trace.csv")


def write_fit_outputs(fitted: Fitted, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    fitted.save(out_dir / "model.json")
    if fitted.history:
        write_history(fitted.history, out_dir / "history.csv")
    write_em_outputs(fitted, out_dir)


__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "Fitted",
    "aggregate",
    "expand_cells",
    "fit_method",
    "generate",
    "load_config",
    "load_fitted",
    "lookup",
    "make_config",
    "reproduce",
    "run_cell",
    "standardize",
]
