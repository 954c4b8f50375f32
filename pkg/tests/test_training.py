import csv

import numpy as np
import pytest

from assortnet.classical import MnlModel
from assortnet.core import ChoiceDataset, ProductUniverse
from assortnet.datagen import AssortmentDistribution, gen_mnl, gen_offer_matrix, sample_dataset
from assortnet.neural import EncoderSpec, GasnSpec, RasnSpec, build_gasn, build_gasn_f, build_rasn
from assortnet.training import TrainConfig, batch_inputs, mean_ce, predict, train, write_history


def _mnl_data(n=6, m=3000, seed=0, truth=None):
    rng = np.random.default_rng(seed)
    truth = truth or gen_mnl(n, rng)
    off = gen_offer_matrix(AssortmentDistribution("D1", n), m, rng)
    return sample_dataset(truth, off, rng)


def _cfg(**kw):
    return TrainConfig.defaults(**{"max_epochs": 15, "patience": 3, **kw})


class TestConfig:
    def test_packaged_defaults(self):
        cfg = TrainConfig.defaults()
        assert (cfg.max_epochs, cfg.batch_size, cfg.lr, cfg.patience) == (200, 256, 1e-3, 10)

    def test_rejects_non_positive(self):
        with pytest.raises(ValueError):
            TrainConfig(0, 256, 1e-3, 10)
        with pytest.raises(ValueError):
            TrainConfig(10, 256, 0.0, 10)


class TestTrain:
    def test_deterministic(self):
        tr, va = _mnl_data(seed=1), _mnl_data(seed=2)
        runs = []
        for _ in range(2):
            g, hist = train(build_gasn(GasnSpec(6, (6,)), seed=3), tr, va, _cfg(max_epochs=5, seed=4))
            runs.append(([(h.train_ce, h.val_ce) for h in hist], [p.value.copy() for p in g.params]))
        assert runs[0][0] == runs[1][0]
        for a, b in zip(runs[0][1], runs[1][1]):
            np.testing.assert_array_equal(a, b)

    def test_restores_best_validation(self):
        tr, va = _mnl_data(m=2000, seed=5), _mnl_data(m=500, seed=6)
        for lr in (0.05, 0.003):
            g0 = build_rasn(RasnSpec(6, 1, 12), seed=0)
            start = mean_ce(g0, va)
            g, hist = train(g0, tr, va, _cfg(lr=lr, max_epochs=30, patience=4))
            # the untrained parameters compete as epoch 0
            assert mean_ce(g, va) == min([start] + [h.val_ce for h in hist])

    def test_early_stopping_patience(self):
        tr, va = _mnl_data(m=1000, seed=5), _mnl_data(m=300, seed=6)
        g0 = build_gasn(GasnSpec(6, (30,)), seed=0)
        start = mean_ce(g0, va)
        _, hist = train(g0, tr, va, _cfg(lr=0.05, max_epochs=200, patience=2))
        vals = [start] + [h.val_ce for h in hist]
        assert len(hist) < 200
        k = int(np.argmin(vals))
        assert len(vals) - 1 - k == 2

    def test_uniform_choices_entropy_floor(self):
        rng = np.random.default_rng(0)
        n = 5

        def make(m):
            off = gen_offer_matrix(AssortmentDistribution("D1", n), m, rng)
            return sample_dataset(MnlModel(np.zeros(n)), off, rng)

        tr, va = make(20_000), make(5_000)
        g, hist = train(build_gasn(GasnSpec(n, (n,)), seed=1), tr, va, _cfg(max_epochs=20))
        floor = float(np.mean(np.log(va.arrays.offered.sum(axis=1))))
        best = min(h.val_ce for h in hist)
        assert abs(best - floor) < 0.01
        # a per-observation CE has sd below ln 5; 4 standard errors of the mean
        assert best > floor - 4 * np.log(n) / np.sqrt(5_000)

    def test_learns_mnl(self):
        truth = gen_mnl(6, np.random.default_rng(9))
        tr, va, te = (_mnl_data(m=m, seed=s, truth=truth) for m, s in ((20_000, 1), (3000, 2), (5000, 3)))
        g, _ = train(build_gasn(GasnSpec(6, (6,)), seed=0), tr, va, _cfg(max_epochs=40, patience=5))
        from assortnet.classical import oracle_ce

        assert mean_ce(g, te) - oracle_ce(truth, te) < 0.02

    def test_non_finite_loss(self):
        tr = _mnl_data(m=100)
        g = build_gasn(GasnSpec(6, ()), seed=0)
        g.params[0].value[0, 0] = np.nan
        with pytest.raises(FloatingPointError, match="lr=0.001"):
            train(g, tr, tr, _cfg())

    def test_history_csv(self, tmp_path):
        tr = _mnl_data(m=300)
        _, hist = train(build_gasn(GasnSpec(6, ()), seed=0), tr, tr, _cfg(max_epochs=3))
        write_history(hist, tmp_path / "h.csv")
        rows = list(csv.reader((tmp_path / "h.csv").open()))
        assert rows[0] == ["epoch", "train_ce", "val_ce", "wall_ms"]
        assert [int(r[0]) for r in rows[1:]] == list(range(1, len(hist) + 1))


class TestPredict:
    def test_named_outputs(self, rng):
        n, d = 4, 2
        off = np.ones((7, n))
        ds = ChoiceDataset.from_arrays(ProductUniverse(n), off, [0] * 7, product=rng.standard_normal((n, d)))
        g = build_gasn_f(GasnSpec(n, (n,)), EncoderSpec(d, 1, (2, 1), (1,)), seed=0)
        u = predict(g, ds, "utilities")
        logits = predict(g, ds, "logits")
        p = predict(g, ds)
        assert u.shape == logits.shape == p.shape == (7, n)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        np.testing.assert_allclose(p, e / e.sum(axis=1, keepdims=True))

    def test_customer_defaults_to_one(self, rng):
        n = 3
        ds = ChoiceDataset.from_arrays(ProductUniverse(n), np.ones((2, n)), [0, 1], product=np.eye(n))
        g = build_gasn_f(GasnSpec(n, ()), EncoderSpec(n, 1, (1,), (1,)), seed=0)
        np.testing.assert_array_equal(batch_inputs(g, ds.arrays, slice(None))["g"], np.ones((2, 1)))

    def test_missing_product_features(self):
        ds = ChoiceDataset.from_arrays(ProductUniverse(3), np.ones((2, 3)), [0, 1])
        g = build_gasn_f(GasnSpec(3, ()), EncoderSpec(2, 1, (1,), (1,)), seed=0)
        with pytest.raises(ValueError, match="product features"):
            predict(g, ds)
