"""Causal triplets, normalization, measurement synthesis, discrepancy metric."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from settlefusion.causal import (HfSpec, NormStats, assemble_hifi,
                                 assemble_lowfi, calibrate_noise, causal_embed,
                                 fit_norm, l2_error, load_lowfi_cache,
                                 save_lowfi_cache, split_scenario_ids,
                                 synthesize_hifi)
from settlefusion.errors import DegenerateRangeError
from settlefusion.ground import (GroundModel, ScenarioSpec, calibrate_gain,
                                 gen_lowfi_dataset, make_grid)

from oracles import naive_causal_embed, naive_l2_error, naive_minmax


def small_raw(seed=6, n_steps=4, n_scenarios=10, n_x1=4, n_x2=3):
    spec = ScenarioSpec(seed=seed, n_steps=n_steps)
    grid = make_grid(n_x1=n_x1, n_x2=n_x2)
    model = calibrate_gain(GroundModel(), spec, grid)
    return gen_lowfi_dataset(model, spec, n_scenarios, grid)


class TestCausalEmbed:
    def test_concrete_arrangement(self):
        p_g = np.array([120.0, 150.0, 200.0])
        p_s = np.array([100.0, 110.0, 130.0])
        out = causal_embed(p_g, p_s, 2, 3)
        assert out.tolist() == [150.0, 120.0, 0.0, 110.0, 100.0, 0.0]

    def test_full_history_no_padding(self):
        p_g = np.array([1.0, 2.0, 3.0])
        p_s = np.array([4.0, 5.0, 6.0])
        out = causal_embed(p_g, p_s, 3, 3)
        assert out.tolist() == [3.0, 2.0, 1.0, 6.0, 5.0, 4.0]

    def test_future_perturbation_invariant(self):
        p_g = np.array([120.0, 150.0, 200.0])
        p_s = np.array([100.0, 110.0, 130.0])
        base = causal_embed(p_g, p_s, 2, 3)
        p_g2 = p_g.copy()
        p_g2[2] = 999.0
        p_s2 = p_s.copy()
        p_s2[2] = -999.0
        assert np.array_equal(causal_embed(p_g2, p_s2, 2, 3), base)

    def test_step_bounds_validated(self):
        p = np.zeros(3)
        with pytest.raises(ValueError):
            causal_embed(p, p, 0, 3)
        with pytest.raises(ValueError):
            causal_embed(p, p, 4, 3)

    @given(t_i=st.integers(1, 12), n_t=st.integers(1, 12),
           seed=st.integers(0, 1000))
    @settings(max_examples=40, deadline=None)
    def test_property_matches_naive_and_pads_zeros(self, t_i, n_t, seed):
        if t_i > n_t:
            return
        rng = np.random.default_rng(seed)
        p_g = rng.uniform(120, 220, n_t)
        p_s = rng.uniform(100, 200, n_t)
        out = causal_embed(p_g, p_s, t_i, n_t)
        assert len(out) == 2 * n_t
        assert np.array_equal(out, naive_causal_embed(p_g, p_s, t_i, n_t))
        assert np.all(out[t_i:n_t] == 0.0)
        assert np.all(out[n_t + t_i:] == 0.0)


class TestNormStats:
    STATS = NormStats(120.0, 220.0, 100.0, 200.0, 0.0, 104.0, -40.0, 40.0, 10.0)

    def test_midpoint_and_boundaries(self):
        assert self.STATS.norm_pg(np.array([170.0]))[0] == 0.5
        assert self.STATS.norm_pg(np.array([120.0]))[0] == 0.0
        assert self.STATS.norm_pg(np.array([220.0]))[0] == 1.0
        assert self.STATS.norm_ps(np.array([100.0]))[0] == 0.0
        assert self.STATS.norm_ps(np.array([200.0]))[0] == 1.0

    def test_matches_naive_minmax(self):
        rng = np.random.default_rng(1)
        vals = rng.uniform(120, 220, 50)
        ours = self.STATS.norm_pg(vals)
        for v, o in zip(vals, ours):
            assert o == pytest.approx(naive_minmax(v, 120.0, 220.0), abs=1e-15)

    def test_settlement_round_trip_many(self):
        rng = np.random.default_rng(2)
        vals = rng.uniform(-12.0, 0.0, 10_000)
        back = self.STATS.denorm_settle(self.STATS.norm_settle(vals))
        assert np.max(np.abs(back - vals)) < 1e-12

    def test_point_round_trip(self):
        rng = np.random.default_rng(3)
        pts = np.column_stack([rng.uniform(0, 104, 10_000),
                               rng.uniform(-40, 40, 10_000)])
        normed = self.STATS.norm_points(pts)
        assert np.all((normed >= 0.0) & (normed <= 1.0))
        back = np.column_stack([normed[:, 0] * 104.0,
                                normed[:, 1] * 80.0 - 40.0])
        assert np.max(np.abs(back - pts)) < 1e-10

    def test_degenerate_ranges_rejected(self):
        with pytest.raises(DegenerateRangeError):
            NormStats(120.0, 120.0, 100.0, 200.0, 0.0, 104.0, -40.0, 40.0, 10.0)
        with pytest.raises(DegenerateRangeError):
            NormStats(120.0, 220.0, 100.0, 200.0, 0.0, 104.0, -40.0, 40.0, 0.0)


class TestSplits:
    def test_hundred_scenarios(self):
        train, val, test = split_scenario_ids(list(range(1, 101)))
        assert len(train) == 80 and len(val) == 10 and len(test) == 10
        assert test == list(range(91, 101))

    def test_ten_scenarios(self):
        train, val, test = split_scenario_ids(list(range(1, 11)))
        assert (len(train), len(val), len(test)) == (8, 1, 1)
        assert test == [10]

    @given(n=st.integers(3, 200))
    @settings(max_examples=30, deadline=None)
    def test_property_disjoint_and_complete(self, n):
        ids = list(range(1, n + 1))
        train, val, test = split_scenario_ids(ids)
        assert sorted(train + val + test) == ids
        assert not (set(train) & set(val))
        assert not (set(train) & set(test))
        assert not (set(val) & set(test))


class TestAssembleLowfi:
    def test_triplet_structure(self):
        raw = small_raw()
        data = assemble_lowfi(raw, fit_norm(raw))
        n_t = raw.spec.n_steps
        n_p = raw.grid.n_points
        assert data.train.n_records == 8 * n_t * n_p
        assert data.val.n_records == 1 * n_t * n_p
        assert data.test.n_records == 1 * n_t * n_p
        branch, trunk, targets = data.train.full()
        assert branch.shape == (8 * n_t * n_p, 2 * n_t)
        assert trunk.shape == (8 * n_t * n_p, 2)
        assert np.all((trunk >= 0.0) & (trunk <= 1.0))
        assert np.max(np.abs(targets)) <= 1.0 + 1e-12

    def test_padding_positions_per_record(self):
        raw = small_raw()
        data = assemble_lowfi(raw, fit_norm(raw))
        n_t = raw.spec.n_steps
        branch, _, _ = data.train.full()
        t_of_row = np.tile(np.repeat(np.arange(1, n_t + 1), raw.grid.n_points),
                           8)
        for row in range(0, len(branch), 37):
            t_i = t_of_row[row]
            assert np.all(branch[row, t_i:n_t] == 0.0)
            assert np.all(branch[row, n_t + t_i:] == 0.0)
            assert np.all(branch[row, :t_i] != 0.0)

    def test_partial_scenario_rejected(self):
        raw = small_raw()
        import dataclasses
        broken = dataclasses.replace(
            raw, scenario_id=raw.scenario_id[:-1], t_i=raw.t_i[:-1],
            point_index=raw.point_index[:-1],
            settlement_mm=raw.settlement_mm[:-1])
        with pytest.raises(ValueError):
            assemble_lowfi(broken, fit_norm(raw))

    def test_settle_scale_from_train_split_only(self):
        raw = small_raw()
        stats = fit_norm(raw)
        train_ids, _, _ = split_scenario_ids(
            sorted(set(raw.scenario_id.tolist())))
        mask = np.isin(raw.scenario_id, train_ids)
        assert stats.settle_scale == pytest.approx(
            np.max(np.abs(raw.settlement_mm[mask])), abs=0.0)

    def test_cache_round_trip(self, tmp_path):
        raw = small_raw()
        data = assemble_lowfi(raw, fit_norm(raw))
        path = tmp_path / "lowfi.bin"
        save_lowfi_cache(data, path)
        back = load_lowfi_cache(path)
        assert back.stats == data.stats
        for split_a, split_b in ((data.train, back.train),
                                 (data.val, back.val),
                                 (data.test, back.test)):
            a = split_a.full()
            b = split_b.full()
            for x, y in zip(a, b):
                assert np.array_equal(x, y)


class TestSynthesizeHifi:
    def test_identity_when_unit_scale_no_noise(self):
        s = np.array([-1.0, -2.0, -3.0])
        out = synthesize_hifi(s, HfSpec(k=1.0, sigma_mm=0.0, seed=0))
        assert np.array_equal(out, s)

    def test_pure_scaling(self):
        s = np.array([-10.0])
        out = synthesize_hifi(s, HfSpec(k=0.7, sigma_mm=0.0, seed=0))
        assert out[0] == pytest.approx(-7.0, abs=1e-15)

    def test_noise_std_statistical(self):
        s = np.zeros(100_000)
        sigma = 0.8
        out = synthesize_hifi(s, HfSpec(k=1.0, sigma_mm=sigma, seed=3))
        assert abs(out.std() - sigma) / sigma < 0.02
        assert abs(out.mean()) < 0.02 * sigma

    def test_deterministic_in_seed(self):
        s = np.linspace(-5, -1, 40)
        spec = HfSpec(k=1.2, sigma_mm=0.5, seed=9)
        assert np.array_equal(synthesize_hifi(s, spec),
                              synthesize_hifi(s, spec))

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            HfSpec(k=0.0, sigma_mm=0.1, seed=0)
        with pytest.raises(ValueError):
            HfSpec(k=1.0, sigma_mm=-0.1, seed=0)


class TestCalibrateNoise:
    def test_budget_saturated_by_scale_error(self):
        s = np.full(100, -5.0)
        assert calibrate_noise(0.3, 0.7, s) == pytest.approx(0.0, abs=1e-12)

    def test_closed_form_value(self):
        s = np.full(64, 5.0)    # mean square 25
        assert calibrate_noise(0.3, 1.0, s) == pytest.approx(1.5, rel=1e-12)

    def test_unreachable_target_names_floor(self):
        s = np.full(10, -4.0)
        with pytest.raises(ValueError, match="0.3"):
            calibrate_noise(0.2, 0.7, s)

    def test_realized_level_close_over_seeds(self):
        rng = np.random.default_rng(11)
        s = rng.uniform(-9.0, -1.0, 600)
        k, target = 0.85, 0.35
        sigma = calibrate_noise(target, k, s)
        levels = []
        for seed in range(20):
            out = synthesize_hifi(s, HfSpec(k=k, sigma_mm=sigma, seed=seed))
            levels.append(l2_error(out, s))
        assert all(abs(lv - target) < 0.05 for lv in levels)


class TestL2Error:
    def test_zero_for_equal(self):
        s = np.array([1.0, -2.0])
        assert l2_error(s, s) == 0.0

    def test_unit_for_zero_prediction(self):
        b = np.array([3.0, -4.0])
        assert l2_error(np.zeros(2), b) == 1.0

    def test_hand_value(self):
        a = np.array([0.0, 1.0, 1.0])
        b = np.array([0.0, 0.0, 2.0])
        assert l2_error(a, b) == pytest.approx(math.sqrt(2) / 2, rel=1e-12)
        assert l2_error(a, b) == pytest.approx(naive_l2_error(a, b), rel=1e-15)

    def test_zero_reference_rejected(self):
        with pytest.raises(ValueError):
            l2_error(np.ones(3), np.zeros(3))


class TestAssembleHifi:
    STATS = NormStats(120.0, 220.0, 100.0, 200.0, 0.0, 104.0, -40.0, 40.0, 10.0)

    def make(self, t_n=3, n_sensors=4, n_t=6, seed=0):
        rng = np.random.default_rng(seed)
        p_g = rng.uniform(120, 220, n_t)
        p_s = rng.uniform(100, 200, n_t)
        readings = rng.uniform(-8.0, 0.0, (t_n, n_sensors))
        sensors = np.column_stack([rng.uniform(0, 104, n_sensors),
                                   rng.uniform(-40, 40, n_sensors)])
        return p_g, p_s, readings, sensors

    def test_cardinality(self):
        p_g, p_s, readings, sensors = self.make(t_n=38, n_sensors=15, n_t=64)
        hf = assemble_hifi(p_g, p_s, readings, sensors, self.STATS, 64)
        assert hf.branch.shape == (570, 128)
        assert hf.trunk.shape == (570, 2)
        assert hf.targets.shape == (570,)

    def test_single_step(self):
        p_g, p_s, readings, sensors = self.make(t_n=1, n_sensors=5)
        hf = assemble_hifi(p_g, p_s, readings[:1], sensors, self.STATS, 6)
        assert hf.branch.shape == (5, 12)

    def test_causality_prefix_identical(self):
        p_g, p_s, readings, sensors = self.make(t_n=4)
        hf3 = assemble_hifi(p_g, p_s, readings[:3], sensors, self.STATS, 6)
        hf4 = assemble_hifi(p_g, p_s, readings[:4], sensors, self.STATS, 6)
        n3 = hf3.branch.shape[0]
        assert np.array_equal(hf4.branch[:n3], hf3.branch)
        assert np.array_equal(hf4.trunk[:n3], hf3.trunk)
        assert np.array_equal(hf4.targets[:n3], hf3.targets)

    def test_missing_reading_listed(self):
        p_g, p_s, readings, sensors = self.make(t_n=3, n_sensors=4)
        readings[1, 2] = np.nan
        with pytest.raises(ValueError, match=r"step 2.*sensor 3"):
            assemble_hifi(p_g, p_s, readings, sensors, self.STATS, 6)

    def test_targets_are_normalized_readings(self):
        p_g, p_s, readings, sensors = self.make(t_n=2, n_sensors=3)
        hf = assemble_hifi(p_g, p_s, readings, sensors, self.STATS, 6)
        expected = readings.reshape(-1) / self.STATS.settle_scale
        assert np.allclose(hf.targets, expected, rtol=0, atol=1e-15)
