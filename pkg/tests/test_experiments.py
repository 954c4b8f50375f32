import csv
import json

import numpy as np
import pytest

from assortnet.classical import MccmModel, MnlModel, NpModel, load_classical
from assortnet.core import load_dataset, validate_dataset
from assortnet.experiments import (
    ConfigError,
    aggregate,
    expand_cells,
    generate,
    load_config,
    lookup,
    make_config,
    net_seed,
    reproduce,
    table6_data,
    warmstart_data,
)

TINY_TRAIN = {"max_epochs": 3, "patience": 2, "batch_size": 64}


def _tiny_table1(**kw):
    params = {"n": 8, "sizes": [200, 400], "val": 100, "test": 150,
              "methods": ["mnl_mle", "mccm_em", "gasn", "rasn"],
              "models": {"gasn": {"hidden": [6]}, "rasn": {"blocks": 1}, "mccm_em": {"max_iter": 5}}}
    return make_config("table1", trials=2, seed=7, train=TINY_TRAIN, params=params, **kw)


def _read(path):
    return list(csv.DictReader(path.open()))


class TestConfigs:
    @pytest.mark.parametrize("pipeline", ["table1", "table2", "table6", "warmstart", "realdata"])
    def test_packaged_defaults_load(self, pipeline):
        cfg = make_config(pipeline)
        assert cfg.trials >= 1 and cfg.params

    def test_table1_defaults(self):
        p = make_config("table1").params
        assert (p["n"], p["sigma"], p["c_num"], p["assortments"]) == (20, 2.5, 4, "D1")
        assert 100_000 in p["sizes"]

    def test_override_params_and_top_level(self):
        cfg = make_config("table6", trials=1, params={"m": 10})
        assert cfg.trials == 1 and cfg.params["m"] == 10 and cfg.params["n"] == 30

    def test_file_merges_defaults(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"pipeline": "table6", "params": {"m": 123}}))
        cfg = load_config(path, seed=5)
        assert cfg.params["m"] == 123 and cfg.params["n"] == 30 and cfg.seed == 5

    def test_json_error_has_position(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{"pipeline": "table1",\n  "trials": }')
        with pytest.raises(ConfigError, match=r"c\.json:2:\d+"):
            load_config(path)

    @pytest.mark.parametrize(
        "body, message",
        [
            ({"pipeline": "table9"}, "pipeline"),
            ({"pipeline": "table1", "bogus": 1}, "unknown field"),
            ({"pipeline": "table1", "trials": 0}, "trials"),
            ({"pipeline": "table1", "params": {"methods": ["svm"]}}, "svm"),
            ({"pipeline": "table1", "train": {"lr": -1}}, "train"),
            ({"pipeline": "table1", "train": {"momentum": 0.9}}, "train"),
        ],
    )
    def test_rejects(self, tmp_path, body, message):
        path = tmp_path / "c.json"
        path.write_text(json.dumps(body))
        with pytest.raises(ConfigError, match=message):
            load_config(path)

    def test_digest_tracks_content(self):
        a, b = make_config("table1"), make_config("table1", seed=1)
        assert a.digest() == make_config("table1").digest() != b.digest()


class TestSeeds:
    def test_net_seed_distinct_and_stable(self):
        seeds = {net_seed(0, t, c) for t in range(5) for c in range(5)}
        assert len(seeds) == 25
        assert net_seed(3, 1, 2) == net_seed(3, 1, 2)

    def test_cells_independent(self):
        cfg = _tiny_table1()
        cells = expand_cells(cfg)
        assert len(cells) == 2 * 3
        assert len(set(cells)) == len(cells)


class TestData:
    def test_table6_splits(self):
        p = make_config("table6", params={"m": 400, "val": 40, "test": 80}).params
        truth, splits, (mix_tr, mix_va) = table6_data(p, 0, 0)
        assert isinstance(truth, MccmModel) and truth.n == 30
        assert len(mix_tr) == 400 and len(mix_va) == 40
        d3 = splits["D3"][0].arrays.offered
        lo, hi = d3[:, :15].sum(axis=1) > 0, d3[:, 15:].sum(axis=1) > 0
        assert not np.any(lo & hi)
        for tr, va, te in splits.values():
            assert (len(tr), len(va), len(te)) == (400, 40, 80)

    def test_warmstart_construction(self):
        p = make_config("warmstart", params={"m_large": 300, "val": 50, "test": 50}).params
        truth, small, data = warmstart_data(p, 0, 0)
        assert truth.n == 26 and small.n == 21
        for name in ("augment", "shrink"):
            for ds in data[name]:
                assert np.all(ds.arrays.offered[:, 0] == 1)
                assert validate_dataset(ds) == []


class TestAggregate:
    def test_stats_and_lookup(self):
        rows = [{"trial": t, "truth": "mnl", "method": "gasn", "m": 10, "ce": v} for t, v in enumerate([1.0, 2.0, 4.0])]
        table = aggregate("table1", rows)
        rec = lookup(table, truth="mnl", method="gasn", m=10)
        assert rec["trials"] == 3
        assert rec["ce_mean"] == pytest.approx(7 / 3)
        assert rec["ce_median"] == 2.0
        assert rec["ce_std"] == pytest.approx(np.std([1, 2, 4], ddof=1))
        with pytest.raises(KeyError):
            lookup(table, truth="np")


class TestReproduce:
    def test_synthetic_outputs(self, tmp_path):
        res = reproduce(_tiny_table1(), tmp_path / "a")
        assert res.ok
        rows = _read(tmp_path / "a" / "rows.csv")
        methods = {r["method"] for r in rows}
        assert methods == {"oracle", "uniform", "mnl_mle", "mccm_em", "gasn", "rasn"}
        assert len(rows) == 2 * 3 * (2 + 2 * 4)
        for truth in ("mnl", "mccm", "np"):
            assert lookup(res.table, truth=truth, method="gasn", m=200)["trials"] == 2
        manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
        assert manifest["assortment_distribution"] == "D1"
        assert manifest["failed_cells"] == 0 and len(manifest["cells"]) == 6
        assert manifest["config"]["seed"] == 7 and "numpy" in manifest["versions"]

    def test_deterministic(self, tmp_path):
        cfg = _tiny_table1()
        reproduce(cfg, tmp_path / "a")
        reproduce(cfg, tmp_path / "b")
        for name in ("rows.csv", "results.csv"):
            a = [{k: v for k, v in r.items() if k != "seconds"} for r in _read(tmp_path / "a" / name)]
            b = [{k: v for k, v in r.items() if k != "seconds"} for r in _read(tmp_path / "b" / name)]
            assert a == b

    def test_worker_pool_matches_serial(self, tmp_path):
        cfg = make_config("table1", trials=2, seed=1, train=TINY_TRAIN,
                          params={"n": 5, "sizes": [100], "val": 50, "test": 50, "truths": ["mnl"],
                                  "methods": ["mnl_mle", "gasn"]})
        serial = reproduce(cfg, tmp_path / "s")
        pooled = reproduce(cfg, tmp_path / "p", jobs=2)
        strip = lambda rows: [{k: v for k, v in r.items() if k != "seconds"} for r in rows]  # noqa: E731
        assert strip(serial.rows) == strip(pooled.rows)

    def test_failed_cell_is_captured(self, tmp_path):
        cfg = make_config("realdata", params={"path": str(tmp_path / "missing.dat")})
        res = reproduce(cfg, tmp_path / "r")
        assert not res.ok and len(res.failures) == 1
        assert "FileNotFoundError" in res.failures[0]["error"]
        manifest = json.loads((tmp_path / "r" / "manifest.json").read_text())
        assert manifest["failed_cells"] == 1

    @pytest.mark.filterwarnings("ignore:products .* never chosen")
    def test_realdata_hotel(self, tmp_path, fixtures):
        cfg = make_config("realdata", train=TINY_TRAIN, params={
            "dataset": "hotel", "path": str(fixtures / "hotel_small.csv"), "hotel_id": 1,
            "splits": [31, 10, 10], "methods": ["mnl_mle", "gasn"], "ace_bins": 2})
        res = reproduce(cfg, tmp_path / "h")
        assert res.ok
        assert {r["method"] for r in res.rows} == {"uniform", "mnl_mle", "gasn"}

    def test_warmstart_curves(self, tmp_path):
        cfg = make_config("warmstart", trials=1, train=TINY_TRAIN, params={
            "n_augment": 8, "n_shrink": 6, "m_large": 300, "val": 60, "test": 60, "sizes": [100, 300],
            "methods": ["gasn", "rasn"], "models": {"gasn": {"hidden": [8]}, "rasn": {"blocks": 1, "block_hidden": 8}}})
        res = reproduce(cfg, tmp_path / "w")
        assert res.ok
        assert {(r["method"], r["m"], r["start"]) for r in res.rows} == {
            (m, s, st) for m in ("gasn", "rasn") for s in (100, 300) for st in ("cold", "warm")}
        for m in (100, 300):
            curve = _read(tmp_path / "w" / f"curves_m{m}.csv")
            assert {r["start"] for r in curve} == {"cold", "warm"}
        rec = lookup(res.table, method="gasn", m=100, start="warm")
        assert rec["final_val_ce_median"] > 0


class TestGenerate:
    def test_table1_files(self, tmp_path):
        cfg = make_config("table1", trials=1, params={"n": 8, "sizes": [50, 80], "val": 20, "test": 30})
        dirs = generate(cfg, tmp_path)
        assert {d.name for d in dirs} == {"mnl", "mccm", "np"}
        kinds = {"mnl": MnlModel, "mccm": MccmModel, "np": NpModel}
        for d in dirs:
            assert isinstance(load_classical(d / "true_model.json"), kinds[d.name])
            assert len(load_dataset(d / "train_m80.jsonl")) == 80
            assert len(load_dataset(d / "test.jsonl")) == 30
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert len(manifest["directories"]) == 3 and manifest["config_hash"] == cfg.digest()

    def test_deterministic(self, tmp_path):
        cfg = make_config("table1", trials=1, params={"n": 5, "sizes": [40], "val": 10, "test": 10, "truths": ["np"]})
        generate(cfg, tmp_path / "a")
        generate(cfg, tmp_path / "b")
        for name in ("train_m40.jsonl", "true_model.json"):
            assert (tmp_path / "a/trial_0/np" / name).read_bytes() == (tmp_path / "b/trial_0/np" / name).read_bytes()

    def test_realdata_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            generate(make_config("realdata"), tmp_path)
