import numpy as np
import pytest

from assortnet.classical import MnlModel, NpModel, choice_probs, mccm_probs
from assortnet.core import Assortment, load_dataset, save_dataset, validate_dataset
from assortnet.datagen import (
    AssortmentDistribution,
    FeatureModelConfig,
    MccmGenConfig,
    gen_assortments,
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
from oracles import mccm_mc_probs, np_brute_probs


class TestGenerators:
    def test_mnl_deterministic(self):
        a = gen_mnl(20, np.random.default_rng(5))
        b = gen_mnl(20, np.random.default_rng(5))
        np.testing.assert_array_equal(a.mean_utilities, b.mean_utilities)

    def test_mnl_standard_normal_mean(self):
        u = gen_mnl(10_000, np.random.default_rng(0)).mean_utilities
        assert abs(u.mean()) < 3 / np.sqrt(10_000)

    @pytest.mark.parametrize("n,sigma,c", [(20, 2.5, 4), (50, 4.0, 10)])
    def test_clustered_is_valid(self, n, sigma, c):
        m = gen_mccm_clustered(MccmGenConfig(n, sigma, c), np.random.default_rng(0))
        assert m.n == n
        np.testing.assert_allclose(m.transition.sum(axis=1), 1, atol=1e-12)

    def test_clustered_block_mass(self):
        n, c = 20, 4
        block = np.arange(n) // (n // c)
        same = block[:, None] == block[None, :]
        within, across = [], []
        for seed in range(100):
            rho = gen_mccm_clustered(MccmGenConfig(n, 2.5, c), np.random.default_rng(seed)).transition
            within.append(rho[same].mean())
            across.append(rho[~same].mean())
        assert np.mean(within) > np.mean(across)

    def test_clustered_config_checks(self):
        with pytest.raises(ValueError):
            MccmGenConfig(20, 2.5, 3)
        with pytest.raises(ValueError):
            MccmGenConfig(20, 0.0, 4)

    def test_plain_positive_and_stochastic(self):
        m = gen_mccm_plain(30, np.random.default_rng(1))
        assert np.all(m.arrival > 0) and np.all(m.transition > 0)
        np.testing.assert_allclose(m.transition.sum(axis=1), 1, atol=1e-12)
        np.testing.assert_allclose(m.arrival.sum(), 1, atol=1e-12)

    @pytest.mark.parametrize("n,k", [(20, 10), (50, 20)])
    def test_np_valid_permutations(self, n, k):
        m = gen_np(n, k, np.random.default_rng(2))
        assert m.permutations.shape == (k, n)
        for row in m.permutations:
            np.testing.assert_array_equal(np.sort(row), np.arange(n))
        np.testing.assert_allclose(m.weights.sum(), 1)

    def test_feature_models_shapes(self):
        fm = gen_feature_models(FeatureModelConfig(50, 5, "mccm"), np.random.default_rng(0))
        assert fm.features.shape == (50, 5) and fm.beta.shape == (5,) and fm.A.shape == (50, 5)
        z, beta, A = fm.features, fm.beta, fm.A
        lam = np.exp(z @ beta) / np.exp(z @ beta).sum()
        np.testing.assert_allclose(fm.model.arrival, lam, rtol=1e-12)
        logits = z @ A.T
        rho = np.exp(logits - logits.max(axis=1, keepdims=True))
        np.testing.assert_allclose(fm.model.transition, rho / rho.sum(axis=1, keepdims=True), rtol=1e-12)

    def test_feature_mnl_zero_beta_uniform(self):
        fm = gen_feature_models(FeatureModelConfig(6, 2, "mnl"), np.random.default_rng(0))
        flat = MnlModel(fm.features @ np.zeros(2))
        p = choice_probs(flat, np.array([[1, 0, 1, 1, 0, 0.0]]))
        np.testing.assert_allclose(p[0], [1 / 3, 0, 1 / 3, 1 / 3, 0, 0])

    def test_feature_mccm_monte_carlo(self):
        fm = gen_feature_models(FeatureModelConfig(6, 3, "mccm"), np.random.default_rng(4))
        a = Assortment((1, 4), 6)
        mc = mccm_mc_probs(fm.model.arrival, fm.model.transition, a.to_bits(), 10**6, np.random.default_rng(9))
        assert 0.5 * np.abs(mc - mccm_probs(fm.model, a)).sum() < 0.005

    def test_plain_arrival_switch(self):
        cfg = FeatureModelConfig(10, 2, "mccm", arrival="plain")
        fm = gen_feature_models(cfg, np.random.default_rng(0))
        assert not np.allclose(fm.model.arrival, np.exp(fm.features @ fm.beta) / np.exp(fm.features @ fm.beta).sum())

    def test_pure_function_of_seed(self):
        a = gen_mccm_clustered(MccmGenConfig(20, 2.5, 4), trial_rng(3, 1, 2))
        b = gen_mccm_clustered(MccmGenConfig(20, 2.5, 4), trial_rng(3, 1, 2))
        np.testing.assert_array_equal(a.transition, b.transition)
        c = gen_mccm_clustered(MccmGenConfig(20, 2.5, 4), trial_rng(3, 1, 3))
        assert not np.array_equal(a.transition, c.transition)


class TestAssortments:
    def test_d1_all_sizes(self):
        off = gen_offer_matrix(AssortmentDistribution("D1", 30), 100_000, np.random.default_rng(0))
        sizes = off.sum(axis=1).astype(int)
        assert set(np.unique(sizes)) == set(range(1, 31))

    def test_d2_inclusion_rate(self):
        off = gen_offer_matrix(AssortmentDistribution("D2", 30), 100_000, np.random.default_rng(0))
        rate = off.mean(axis=0)
        assert np.all(np.abs(rate - 0.5) < 0.01)

    def test_d3_halves(self):
        off = gen_offer_matrix(AssortmentDistribution("D3", 30), 5_000, np.random.default_rng(0))
        low = off[:, :15].any(axis=1)
        high = off[:, 15:].any(axis=1)
        assert not np.any(low & high)
        assert low.any() and high.any()

    def test_d4_sizes(self):
        off = gen_offer_matrix(AssortmentDistribution("D4", 30), 5_000, np.random.default_rng(0))
        assert set(np.unique(off.sum(axis=1).astype(int))) == {10, 11}

    def test_d4_non_divisible(self):
        off = gen_offer_matrix(AssortmentDistribution("D4", 31), 2_000, np.random.default_rng(0))
        assert set(np.unique(off.sum(axis=1).astype(int))) == {10, 11}

    @pytest.mark.parametrize("kind", ["D1", "D2", "D3", "D4"])
    def test_never_empty_and_no_purchase(self, kind):
        dist = AssortmentDistribution(kind, 8, include_no_purchase=True, no_purchase_index=0)
        assorts = gen_assortments(dist, 500, np.random.default_rng(1))
        assert all(0 in a and len(a) >= 1 for a in assorts)

    def test_d2_small_n_resamples_empty(self):
        off = gen_offer_matrix(AssortmentDistribution("D2", 1), 200, np.random.default_rng(0))
        assert np.all(off.sum(axis=1) == 1)

    def test_matrix_matches_list(self):
        dist = AssortmentDistribution("D1", 6)
        a = gen_assortments(dist, 50, np.random.default_rng(3))
        b = gen_offer_matrix(dist, 50, np.random.default_rng(3))
        np.testing.assert_array_equal(np.stack([x.to_bits() for x in a]), b)

    def test_invalid(self):
        with pytest.raises(ValueError):
            AssortmentDistribution("D5", 5)
        with pytest.raises(ValueError):
            AssortmentDistribution("D1", 5, include_no_purchase=True)


class TestSampleDataset:
    def test_shape_and_validity(self):
        rng = np.random.default_rng(0)
        model = gen_mccm_clustered(MccmGenConfig(20, 2.5, 4), rng)
        off = gen_offer_matrix(AssortmentDistribution("D1", 20), 11_000, rng)
        ds = sample_dataset(model, off, rng)
        assert len(ds) == 11_000 and ds.n == 20
        assert validate_dataset(ds) == []

    def test_deterministic_np(self):
        rng = np.random.default_rng(0)
        m = NpModel(np.array([[4, 2, 0, 1, 3]]), np.array([1.0]))
        assorts = gen_assortments(AssortmentDistribution("D1", 5), 200, rng)
        ds = sample_dataset(m, assorts, rng)
        for obs in ds.observations:
            want = np_brute_probs(m.permutations, m.weights, obs.assortment.members, 5)
            assert want[obs.choice] == 1.0

    def test_byte_identical_files(self, tmp_path):
        def make(path):
            rng = trial_rng(7, 0)
            m = gen_mnl(5, rng)
            off = gen_offer_matrix(AssortmentDistribution("D1", 5), 300, rng)
            save_dataset(sample_dataset(m, off, rng), path)
            return path.read_bytes()

        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        assert make(tmp_path / "a" / "d.jsonl") == make(tmp_path / "b" / "d.jsonl")

    def test_feature_model_attaches_table(self):
        rng = np.random.default_rng(0)
        fm = gen_feature_models(FeatureModelConfig(7, 3, "mnl"), rng)
        ds = sample_dataset(fm, np.ones((10, 7)), rng)
        np.testing.assert_array_equal(ds.product_features, fm.features)

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            sample_dataset(gen_mnl(3, np.random.default_rng(0)), np.ones((2, 4)), np.random.default_rng(0))

    def test_round_trip_through_files(self, tmp_path):
        rng = np.random.default_rng(0)
        ds = sample_dataset(gen_mnl(4, rng), np.ones((5, 4)), rng, no_purchase_index=0)
        back = load_dataset(save_dataset(ds, tmp_path / "x.jsonl"))
        assert back.universe.no_purchase_index == 0


class TestShrink:
    def test_mass_conservation(self):
        m = gen_mccm_plain(26, np.random.default_rng(0))
        s = shrink_mccm(m, 21, 0)
        assert s.n == 21
        np.testing.assert_allclose(s.arrival.sum(), 1, atol=1e-12)
        np.testing.assert_allclose(s.transition.sum(axis=1), 1, atol=1e-12)
        np.testing.assert_allclose(s.arrival[0], m.arrival[0] + m.arrival[21:].sum(), atol=1e-15)
        np.testing.assert_allclose(s.transition[3, 0], m.transition[3, 0] + m.transition[3, 21:].sum(), atol=1e-15)
        np.testing.assert_array_equal(s.transition[1:, 1:], m.transition[1:21, 1:21])

    def test_identity(self):
        m = gen_mccm_plain(6, np.random.default_rng(0))
        s = shrink_mccm(m, 6, 0)
        np.testing.assert_array_equal(s.arrival, m.arrival)
        np.testing.assert_array_equal(s.transition, m.transition)

    def test_sink_must_be_kept(self):
        m = gen_mccm_plain(6, np.random.default_rng(0))
        with pytest.raises(ValueError):
            shrink_mccm(m, 3, 4)
        with pytest.raises(ValueError):
            shrink_mccm(m, [0, 0, 1], 0)
