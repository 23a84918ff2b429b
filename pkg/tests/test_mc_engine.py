"""
Tests for path simulation, regression and the Monte-Carlo XVA cross-check.
"""

import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from pydantic import ValidationError

import mc_engine
from exceptions import ConfigError, RegressionSingular
from im import DeltaVaRIM, SimmEquityIM
from mc_engine import McConfig, _stderr, mc_check, mc_xva, regress, simulate_paths
from xva import CollateralMode, CurveSet, make_context, price_all_in


@pytest.fixture
def small_cfg():
    return McConfig(n_paths=2000, steps_per_year=26, block_size=500, seed=7)


@pytest.fixture
def rate_ctx(receiver_2y, mnl_model, coarse_rate_grid):
    return make_context(receiver_2y, mnl_model, 13.0, grid=coarse_rate_grid)


class TestConfig:
    def test_defaults(self):
        cfg = McConfig()
        assert cfg.n_paths == 100_000 and cfg.basis_degree == 4
        assert cfg.antithetic and cfg.control_variate

    @pytest.mark.parametrize("field,value", [("n_paths", 1), ("basis_degree", 7), ("basis_degree", 1), ("steps_per_year", 0)])
    def test_rejects_out_of_range(self, field, value):
        with pytest.raises(ValidationError):
            McConfig(**{field: value})


class TestSimulation:
    def test_zero_volatility_follows_the_ode(self, deterministic_model):
        cfg = McConfig(n_paths=10, steps_per_year=52, block_size=4)
        paths = simulate_paths(deterministic_model, 1.0, cfg)
        p = deterministic_model.params
        expected = p.theta + (p.r0 - p.theta) * math.exp(-p.a * 1.0)
        np.testing.assert_allclose(paths.states[-1], expected, atol=1e-4)
        assert np.ptp(paths.states[-1]) == 0.0

    def test_event_dates_are_time_nodes(self, mnl_model, small_cfg):
        paths = simulate_paths(mnl_model, 1.0, small_cfg, event_dates=[0.3, 0.7])
        for date in (0.3, 0.7):
            assert np.min(np.abs(paths.times - date)) < 1e-12
        assert paths.states.shape == (len(paths.times), 2000)

    def test_same_seed_same_paths(self, mnl_model, small_cfg):
        first = simulate_paths(mnl_model, 1.0, small_cfg)
        with ThreadPoolExecutor(max_workers=2) as pool:
            second = simulate_paths(mnl_model, 1.0, small_cfg, executor=pool)
        np.testing.assert_array_equal(first.states, second.states)

    def test_different_seed_different_paths(self, mnl_model, small_cfg):
        first = simulate_paths(mnl_model, 1.0, small_cfg)
        second = simulate_paths(mnl_model, 1.0, small_cfg.model_copy(update={"seed": 8}))
        assert not np.array_equal(first.states, second.states)

    def test_antithetic_pairs(self, mnl_model):
        cfg = McConfig(n_paths=10, steps_per_year=12, block_size=4)
        paths = simulate_paths(mnl_model, 1.0, cfg)
        np.testing.assert_array_equal(np.bincount(paths.pair_ids), [2, 2, 2, 2, 2])
        dt = paths.times[1] - paths.times[0]
        x0 = mnl_model.x0
        centre = x0 + float(mnl_model.drift(np.array([x0]))[0]) * dt
        assert paths.states[1, 0] + paths.states[1, 2] == pytest.approx(2.0 * centre)

    def test_stderr_uses_pair_means(self):
        values = np.array([1.0, 3.0, 5.0, 7.0])
        assert _stderr(values, np.array([0, 0, 1, 1])) == pytest.approx(2.0)
        assert _stderr(values[:1], np.array([0])) == 0.0


class TestRegression:
    def test_recovers_polynomial(self):
        rng = np.random.default_rng(3)
        x = rng.normal(0.02, 0.01, 500)
        y = 1.0 + 20.0 * x - 300.0 * x * x
        fit = regress(x, y, 4)
        np.testing.assert_allclose(fit(x), y, atol=1e-9)

    def test_constant_state_gives_no_fit(self):
        assert regress(np.full(10, 0.02), np.arange(10.0), 4) is None

    def test_rank_deficient_design(self):
        x = np.array([0.01, 0.02] * 10)
        with pytest.raises(RegressionSingular):
            regress(x, x * 2.0, 4)


class TestMcXva:
    def test_rejects_equity_portfolio(self, call_portfolio, mnl_model, small_cfg):
        with pytest.raises(ConfigError):
            mc_xva(call_portfolio, mnl_model, CurveSet(), None, small_cfg)

    def test_rejects_simm(self, receiver_2y, mnl_model, small_cfg):
        with pytest.raises(ConfigError):
            mc_xva(receiver_2y, mnl_model, CurveSet(s_l=50), SimmEquityIM(), small_cfg)

    def test_zero_multiplier_gives_zero_mva(self, receiver_2y, mnl_model, small_cfg, rate_ctx):
        spec = DeltaVaRIM(eta_plus=0.0, eta_minus=0.0)
        report = mc_xva(receiver_2y, mnl_model, CurveSet(s_l=100), spec, small_cfg, CollateralMode.FULL_VM, ctx=rate_ctx)
        assert report.mva == 0.0
        assert set(report.stderr) == {"npv", "mva", "cva"}

    def test_mva_positive_with_margin(self, receiver_2y, mnl_model, small_cfg, rate_ctx):
        spec = DeltaVaRIM.from_preset("ten_day")
        report = mc_xva(receiver_2y, mnl_model, CurveSet(s_l=100), spec, small_cfg, CollateralMode.FULL_VM, ctx=rate_ctx)
        assert report.mva > 0.0

    @pytest.mark.integration
    def test_riskfree_value_agrees_with_pde(self, receiver_2y, mnl_model, rate_ctx):
        cfg = McConfig(n_paths=20_000, steps_per_year=52, block_size=5000, control_variate=False)
        report = mc_xva(receiver_2y, mnl_model, CurveSet(), None, cfg, CollateralMode.FULL_VM, ctx=rate_ctx)
        fd = price_all_in(receiver_2y, mnl_model, CurveSet(), mode=CollateralMode.FULL_VM, ctx=rate_ctx).value_at(mnl_model.x0)
        assert abs(report.npv - fd) < 3.0 * report.stderr["npv"] + 2e-5

    def test_control_variate_pins_riskfree_value(self, receiver_2y, mnl_model, small_cfg, rate_ctx):
        report = mc_xva(receiver_2y, mnl_model, CurveSet(), None, small_cfg, CollateralMode.FULL_VM, ctx=rate_ctx)
        fd = price_all_in(receiver_2y, mnl_model, CurveSet(), mode=CollateralMode.FULL_VM, ctx=rate_ctx).value_at(mnl_model.x0)
        assert report.npv == pytest.approx(fd, abs=1e-12)


class TestMcCheck:
    @pytest.mark.integration
    def test_frame_layout(self, receiver_2y, mnl_model, small_cfg, rate_ctx):
        ladder = [CurveSet(name="flat"), CurveSet(name="funded", s_l=50)]
        frame = mc_check(receiver_2y, mnl_model, ladder, DeltaVaRIM.from_preset("ten_day"), small_cfg, CollateralMode.FULL_VM, rate_ctx)
        assert list(frame.columns) == [
            "label",
            "fd_npv",
            "mc_npv",
            "npv_diff",
            "fd_mva",
            "mc_mva",
            "mva_diff",
            "mc_npv_stderr",
            "mc_mva_stderr",
        ]
        assert list(frame["label"]) == ["flat", "funded"]
        assert frame.loc[0, "fd_mva"] == 0.0 and frame.loc[0, "mc_mva"] == 0.0

    @pytest.mark.integration
    def test_rows_share_paths_and_repeated_rungs(self, receiver_2y, mnl_model, small_cfg, rate_ctx, mocker):
        client = dict(cds_b=75, basis_b=50, s_l=50)
        ladder = [CurveSet(name="AAA", cds_c=20, basis_c=10, **client), CurveSet(name="BBB", cds_c=250, basis_c=80, **client)]
        spec = DeltaVaRIM.from_preset("ten_day", eta_plus=3.0)
        simulate = mocker.spy(mc_engine, "simulate_paths")
        rollback = mocker.spy(mc_engine, "_pathwise_value")
        frame = mc_check(receiver_2y, mnl_model, ladder, spec, small_cfg, ctx=rate_ctx)
        assert simulate.call_count == 1
        # base, dva, dfa and the risk-free rung are rolled back once for both rows
        assert rollback.call_count == 12

        for i, curves in enumerate(ladder):
            alone = mc_xva(receiver_2y, mnl_model, curves, spec, small_cfg, ctx=rate_ctx)
            assert frame.loc[i, "mc_npv"] == pytest.approx(alone.yv(alone.npv), rel=1e-12, abs=1e-12)
            assert frame.loc[i, "mc_mva"] == pytest.approx(alone.yv(alone.mva), rel=1e-12, abs=1e-12)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
