"""
Tests for the short-rate models, bond surfaces and calibration.
"""

import math

import numpy as np
import pytest
from pydantic import ValidationError

import ratemodels
from exceptions import ConfigError, MissingZcb, NoConvergence
from ratemodels import (
    BkModel,
    BkParams,
    CalibrationTargets,
    LONG_TERM_RATE,
    MnlModel,
    MnlParams,
    ZcbProvider,
    bk_coefficients,
    bk_mean_level,
    build_model,
    calibrate,
    libor_term_rate,
    mnl_coefficients,
    target_residuals,
    zcb_price,
)


@pytest.fixture
def targets():
    return CalibrationTargets(libor3m=0.0028, par10y=0.023587, cap10y_yv=86.83)


class TestCoefficients:
    def test_mnl_volatility_pieces(self, mnl_params):
        rates = np.array([-0.01, 0.0, 0.0075, 0.03, 0.09])
        _, vol = mnl_coefficients(rates, mnl_params)
        s = mnl_params.sigma2
        np.testing.assert_allclose(vol, [0.0, 0.0, 0.5 * s, s, 1.5 * s])

    def test_mnl_drift_reverts_to_long_term_rate(self, mnl_params):
        drift, _ = mnl_coefficients(np.array([0.0, LONG_TERM_RATE, 0.1]), mnl_params)
        assert drift[0] > 0 and drift[1] == pytest.approx(0.0) and drift[2] < 0

    def test_scalar_input_gives_floats(self, mnl_params):
        drift, vol = mnl_coefficients(0.03, mnl_params)
        assert isinstance(drift, float) and isinstance(vol, float)

    def test_bk_coefficients(self):
        params = BkParams(kappa=0.1, mu=math.log(0.044), sigma=0.4, x0=math.log(0.01))
        drift, vol = bk_coefficients(np.array([math.log(0.044), math.log(0.01)]), params)
        np.testing.assert_allclose(vol, 0.4)
        assert drift[0] == pytest.approx(0.0)
        assert drift[1] > 0

    def test_bk_mean_rules(self):
        assert bk_mean_level(0.1, 0.4, "median") == pytest.approx(math.log(0.044))
        assert bk_mean_level(0.1, 0.4, "mean") == pytest.approx(math.log(0.044) - 0.16 / 0.4)


class TestModels:
    def test_mnl_model_surface(self, mnl_model):
        assert mnl_model.kind == "mnl"
        assert not mnl_model.log_state
        assert mnl_model.boundary_convexity == 0.0
        assert mnl_model.x0 == 0.02
        np.testing.assert_allclose(mnl_model.libor_rate(np.array([0.01, 0.02])), [0.01, 0.02])

    def test_bk_model_surface(self):
        model = BkModel(BkParams(kappa=0.1, mu=math.log(0.044), sigma=0.4, x0=math.log(0.01)))
        assert model.log_state and model.boundary_convexity == 1.0
        assert model.libor_rate(np.array([model.x0]))[0] == pytest.approx(0.01)

    def test_build_model_dispatch(self, mnl_params):
        assert isinstance(build_model(mnl_params), MnlModel)
        model = build_model(mnl_params, bounds=(-0.02, 0.3))
        assert model.default_bounds == (-0.02, 0.3)

    def test_make_grid_ignores_none_overrides(self, mnl_model):
        grid = mnl_model.make_grid(n_space=101, n_time_per_year=None)
        assert (grid.x_min, grid.x_max) == mnl_model.default_bounds
        assert grid.n_space == 101 and grid.n_time_per_year == 120

    def test_params_validation(self):
        with pytest.raises(ValidationError):
            MnlParams(a=-0.1, sigma2=0.01, r0=0.01)
        with pytest.raises(ValidationError):
            MnlParams(a=0.1, sigma2=0.01, r0=0.01, beta=1.0)

    def test_targets_require_libor(self):
        with pytest.raises(ValidationError) as exc:
            CalibrationTargets(par10y=0.02, cap10y_yv=80.0)
        assert "libor3m" in str(exc.value)


class TestBonds:
    def test_zcb_with_pinned_rate(self, frozen_model):
        grid = frozen_model.make_grid(n_space=201, n_time_per_year=200)
        surface = zcb_price(frozen_model, 0.0, 5.0, grid, libor_ois=0.0013)
        assert surface.value_at(0.03) == pytest.approx(math.exp(-(0.03 - 0.0013) * 5.0), rel=1e-6)

    def test_zcb_at_maturity_is_one(self, mnl_model, coarse_rate_grid):
        surface = zcb_price(mnl_model, 2.0, 2.0, coarse_rate_grid, 0.0013)
        np.testing.assert_allclose(surface.values, 1.0)

    def test_zcb_rejects_reversed_dates(self, mnl_model, coarse_rate_grid):
        with pytest.raises(ConfigError):
            zcb_price(mnl_model, 3.0, 2.0, coarse_rate_grid, 0.0013)

    def test_zcb_decreases_with_rate(self, mnl_model, coarse_rate_grid):
        surface = zcb_price(mnl_model, 0.0, 1.0, coarse_rate_grid, 0.0013)
        inside = (coarse_rate_grid.nodes > 0.0) & (coarse_rate_grid.nodes < 0.15)
        assert np.all(np.diff(surface.values[inside]) < 0)

    def test_provider_lookup(self, frozen_model):
        grid = frozen_model.make_grid(n_space=101, n_time_per_year=50)
        zcb = ZcbProvider(frozen_model, grid, 0.0).prepare([0.25, 0.25])
        assert zcb.accruals == [0.25]
        bond = zcb.bond(3.0, 3.25, np.array([0.03]))
        assert bond[0] == pytest.approx(math.exp(-0.03 * 0.25), rel=1e-6)
        with pytest.raises(MissingZcb):
            zcb.surface(1.0, 1.5)

    def test_libor_term_rate(self, frozen_model):
        grid = frozen_model.make_grid(n_space=101, n_time_per_year=400)
        expected = (math.exp(0.03 * 0.25) - 1.0) / 0.25
        assert libor_term_rate(frozen_model, 0.25, grid) == pytest.approx(expected, rel=1e-5)


class TestCalibration:
    def test_unknown_kind(self, targets):
        with pytest.raises(ConfigError):
            calibrate("hull_white", targets)

    def test_converges_on_linear_residuals(self, targets, mocker):
        def fake(model, targets, grid, executor=None):
            p = model.params
            return {
                "libor3m": (p.r0 - 0.01) / 1e-4,
                "par10y": (p.a - 0.07) / 1e-4,
                "cap10y_yv": (p.sigma2 - 0.012) / 1e-4,
            }

        mocker.patch.object(ratemodels, "target_residuals", side_effect=fake)
        result = calibrate("mnl", targets, grid_overrides={"n_space": 51})
        assert result.params.r0 == pytest.approx(0.01, abs=1e-8)
        assert result.params.a == pytest.approx(0.07, abs=1e-8)
        assert result.params.sigma2 == pytest.approx(0.012, abs=1e-8)
        assert result.max_residual_bp < 0.01
        assert isinstance(result.model, MnlModel)

    def test_bk_mean_rule_fixes_mu(self, targets, mocker):
        def fake(model, targets, grid, executor=None):
            p = model.params
            return {
                "libor3m": (p.x0 - math.log(0.01)) / 1e-4,
                "par10y": (p.kappa - 0.05) / 1e-4,
                "cap10y_yv": (p.sigma - 0.3) / 1e-4,
            }

        mocker.patch.object(ratemodels, "target_residuals", side_effect=fake)
        result = calibrate("bk", targets, bk_mean_rule="mean")
        assert result.params.mu == pytest.approx(bk_mean_level(0.05, 0.3, "mean"), abs=1e-6)

    def test_reports_residuals_on_failure(self, targets, mocker):
        mocker.patch.object(
            ratemodels,
            "target_residuals",
            return_value={"libor3m": 1.0, "par10y": 0.0, "cap10y_yv": 0.0},
        )
        with pytest.raises(NoConvergence) as exc:
            calibrate("mnl", targets, max_iterations=10)
        assert exc.value.residuals == [1.0, 0.0, 0.0]

    @pytest.mark.integration
    def test_target_residuals_are_finite(self, mnl_model, targets):
        grid = mnl_model.make_grid(n_space=121, n_time_per_year=12)
        residuals = target_residuals(mnl_model, targets, grid)
        assert set(residuals) == {"libor3m", "par10y", "cap10y_yv"}
        assert all(np.isfinite(v) for v in residuals.values())

    @pytest.mark.slow
    @pytest.mark.parametrize("kind", ["mnl", "bk"])
    def test_fits_quotes_through_the_solver(self, kind, targets):
        overrides = {"n_space": 400, "n_time_per_year": 100}
        result = calibrate(kind, targets, grid_overrides=overrides, max_iterations=200)
        assert result.max_residual_bp < 0.01
        assert result.evaluations > 1
        again = target_residuals(result.model, targets, result.model.make_grid(**overrides))
        assert max(abs(v) for v in again.values()) < 0.01


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
