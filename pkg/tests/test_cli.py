"""
Tests for the run-config schema and the command-line entry point.
"""

from pathlib import Path

import numpy as np
import pytest
import pytest_asyncio
import yaml

import cli
from cli import XvaSystem, build_parser, main
from exceptions import ConfigError, NoConvergence
from models import dump_run_config, load_run_config, parse_run_config
from ratemodels import CalibrationResult, MnlModel, MnlParams

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"

CALL_OPTION = {
    "type": "equity_option",
    "spot": 100,
    "strike": 100,
    "expiry": 1,
    "kind": "call",
    "sigma": 0.5,
    "rate": 0.01,
}
COARSE_ENGINE = {"grid": {"n_space": 101, "n_time_per_year": 20}}


def write_config(path: Path, data: dict) -> Path:
    path.write_text(yaml.safe_dump(data, sort_keys=False))
    return path


@pytest_asyncio.fixture
async def system():
    xva_system = XvaSystem()
    await xva_system.initialize()
    yield xva_system
    await xva_system.cleanup()


class TestParser:
    def test_commands(self):
        args = build_parser().parse_args(["mc-check", "--config", "run.yaml"])
        assert args.command == "mc-check"
        assert args.config == Path("run.yaml")
        assert args.out is None

    def test_config_is_required(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["xva"])


class TestRunConfig:
    @pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.yaml")), ids=lambda p: p.stem)
    def test_shipped_configs_parse(self, path):
        config = load_run_config(path)
        assert parse_run_config(yaml.safe_load(dump_run_config(config))) == config

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            parse_run_config({"curves": [{"name": "a", "cds_x": 10}]})

    def test_missing_target_is_named(self):
        with pytest.raises(ConfigError) as exc:
            parse_run_config({"model": {"kind": "mnl", "targets": {"par10y": 0.02, "cap10y_yv": 80.0}}})
        assert "libor3m" in str(exc.value)

    def test_params_must_match_kind(self):
        with pytest.raises(ConfigError):
            parse_run_config({"model": {"kind": "bk", "params": {"a": 0.1, "sigma2": 0.01, "r0": 0.02}}})

    def test_mixed_portfolio_rejected(self):
        swap = {"type": "swap", "direction": "payer", "maturity": 5}
        with pytest.raises(ConfigError):
            parse_run_config({"instruments": [{"instrument": CALL_OPTION}, {"instrument": swap}]})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "absent.yaml")

    def test_bad_yaml(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("curves: [unclosed\n")
        with pytest.raises(ConfigError):
            load_run_config(path)

    def test_portfolio_needs_instruments(self):
        with pytest.raises(ConfigError):
            parse_run_config({}).portfolio()

    def test_rates_exclude_netting(self):
        with pytest.raises(ConfigError):
            parse_run_config({"xva": {"rates": True, "netting": True}})


class TestMain:
    @pytest.mark.asyncio
    async def test_validate_writes_config(self, tmp_path):
        out = tmp_path / "echo.yaml"
        code = await main(["validate", "--config", str(CONFIG_DIR / "table1_ratings.yaml"), "--out", str(out)])
        assert code == 0
        assert load_run_config(out) == load_run_config(CONFIG_DIR / "table1_ratings.yaml")

    @pytest.mark.asyncio
    async def test_unknown_key_exit_code(self, tmp_path):
        path = write_config(tmp_path / "run.yaml", {"bogus": 1})
        assert await main(["validate", "--config", str(path)]) == 2

    @pytest.mark.asyncio
    async def test_missing_file_exit_code(self, tmp_path):
        assert await main(["xva", "--config", str(tmp_path / "absent.yaml")]) == 2

    @pytest.mark.asyncio
    async def test_no_convergence_exit_code(self, tmp_path, mocker):
        path = write_config(tmp_path / "run.yaml", {"instruments": [{"instrument": CALL_OPTION}]})
        mocker.patch.object(XvaSystem, "run", side_effect=NoConvergence("picard stalled", step=3, residual=1e-3))
        assert await main(["xva", "--config", str(path)]) == 3

    @pytest.mark.asyncio
    async def test_calibrate_writes_params(self, tmp_path, mocker):
        params = MnlParams(a=0.08, sigma2=0.0105, r0=0.0028)
        result = CalibrationResult(
            params=params,
            residuals_bp={"libor3m": 0.0, "par10y": 0.01, "cap10y_yv": -0.02},
            evaluations=12,
            model=MnlModel(params),
        )
        fake = mocker.patch.object(cli, "calibrate", return_value=result)
        out = tmp_path / "params.yaml"
        code = await main(["calibrate", "--config", str(CONFIG_DIR / "calibrate_mnl.yaml"), "--out", str(out)])
        assert code == 0
        fake.assert_called_once()
        document = yaml.safe_load(out.read_text())
        assert document["model"]["kind"] == "mnl"
        assert set(document["model"]["params"]) == {"a", "theta", "sigma2", "r0"}
        assert document["evaluations"] == 12
        assert parse_run_config({"model": document["model"]}).model.params == params


class TestCommands:
    @pytest.mark.asyncio
    @pytest.mark.integration
    async def test_simm_without_funding_cost(self, system):
        config = parse_run_config(
            {
                "instruments": [{"instrument": CALL_OPTION, "label": "call_1y"}],
                "engine": COARSE_ENGINE,
                "simm": {"scenarios": [{"name": "free"}]},
            }
        )
        frame = await system.cmd_simm(config, None)
        row = frame.iloc[0]
        for column in ("MVA-dgv", "MVA-gv", "MVA-M0.234", "MVA 2y dgv"):
            assert row[column] == 0.0
        assert row["Bid"] == row["Ask"] == row["Riskfree"]
        assert row["Sprd (%)"] == 0.0

    @pytest.mark.asyncio
    @pytest.mark.integration
    async def test_simm_funding_cost_orders_quotes(self, system, tmp_path):
        config = parse_run_config(
            {
                "instruments": [{"instrument": CALL_OPTION}],
                "engine": COARSE_ENGINE,
                "simm": {"scenarios": [{"name": "0% Lev", "unsec_rate": 0.01}]},
            }
        )
        out = tmp_path / "simm.csv"
        frame = await system.cmd_simm(config, out)
        row = frame.iloc[0]
        assert row["Bid"] < row["Riskfree"] < row["Ask"]
        assert row["MVA-gv"] < row["MVA-dgv"]
        assert row["MVA-M0.234"] < row["MVA-dgv"]
        assert out.exists()

    @pytest.mark.asyncio
    @pytest.mark.integration
    async def test_equity_netting_rows(self, system):
        config = parse_run_config(
            {
                "instruments": [{"instrument": CALL_OPTION, "label": "call_1y"}],
                "curves": [{"name": "A", "cds_c": 50}],
                "engine": COARSE_ENGINE,
                "xva": {"netting": True},
            }
        )
        frame = await system.cmd_xva(config, None)
        assert list(frame["label"]) == ["call_1y", "Sum", "Portf", "Difference"]
        assert set(frame["curves"]) == {"A"}
        difference = frame[frame["label"] == "Difference"].iloc[0]
        for column in ("NPV", "CVA", "DVA", "MVA", "TVA"):
            assert difference[column] == 0.0

    @pytest.mark.asyncio
    async def test_simm_needs_equity(self, system):
        config = parse_run_config(
            {
                "instruments": [{"instrument": {"type": "swap", "direction": "payer", "maturity": 2, "fixed_rate": 0.02}}],
                "simm": {"scenarios": [{"name": "free"}]},
            }
        )
        with pytest.raises(ConfigError):
            await system.cmd_simm(config, None)

    @pytest.mark.asyncio
    async def test_rate_pricing_needs_model(self, system):
        config = parse_run_config(
            {"instruments": [{"instrument": {"type": "swap", "direction": "payer", "maturity": 2, "fixed_rate": 0.02}}]}
        )
        with pytest.raises(ConfigError):
            await system.cmd_xva(config, None)

    @pytest.mark.asyncio
    async def test_rates_need_a_single_swap(self, system):
        config = parse_run_config({"instruments": [{"instrument": CALL_OPTION}], "xva": {"rates": True}})
        with pytest.raises(ConfigError):
            await system.cmd_xva(config, None)


@pytest.mark.slow
@pytest.mark.integration
class TestShippedRuns:
    """End-to-end runs of the shipped configs against the published tables."""

    @pytest.mark.asyncio
    async def test_simm_table(self, system):
        frame = await system.cmd_simm(load_run_config(CONFIG_DIR / "table6_simm.yaml"), None)
        assert list(frame["Sprd (%)"].round(4)) == [0.75, 1.0, 1.42, 1.84, 15.0]
        np.testing.assert_allclose(frame["MVA-dgv"], [0.15, 0.20, 0.28, 0.37, 2.92], atol=0.03)
        np.testing.assert_allclose(frame["MVA-gv"], [0.04, 0.05, 0.07, 0.09, 0.75], atol=0.02)
        np.testing.assert_allclose(frame["MVA 2y dgv"], [0.32, 0.42, 0.60, 0.77, 6.00], atol=0.06)
        assert (frame["Bid"] < frame["Riskfree"]).all() and (frame["Riskfree"] < frame["Ask"]).all()

    @pytest.mark.asyncio
    async def test_rating_ladder(self, system):
        config = load_run_config(CONFIG_DIR / "table1_ratings.yaml")
        frame = await system.cmd_xva(config, None)
        mva = frame["mva_pv"] / frame["annuity"] / 1e-4
        assert list(frame["label"]) == ["AAA", "AA", "A", "BBB", "BB", "B"]
        assert mva.between(1.5, 2.9).all()
        assert (mva.diff().dropna() < 0).all()

        document = yaml.safe_load(dump_run_config(config))
        document["curves"] = [c for c in document["curves"] if c["name"] == "BBB"]
        document["im"]["eta_plus"] = document["im"]["eta_minus"] = 1.0
        single = await system.cmd_xva(parse_run_config(document), None)
        assert 0.5 <= single.loc[0, "mva_pv"] / single.loc[0, "annuity"] / 1e-4 <= 0.95

    @pytest.mark.asyncio
    async def test_curve_trade_netting(self, system):
        frame = await system.cmd_xva(load_run_config(CONFIG_DIR / "table2_curve_trade.yaml"), None)
        rows = frame.set_index("label")
        for column in ("CVA", "DVA", "CFA", "DFA", "MVA"):
            assert rows.loc["Portf", column] <= rows.loc["Sum", column] + 1e-6

    @pytest.mark.asyncio
    async def test_cap_floor_netting(self, system):
        frame = await system.cmd_xva(load_run_config(CONFIG_DIR / "table3_cap_floor.yaml"), None)
        rows = frame.set_index("label")
        assert rows.loc["long_cap", "MVA"] > 0.0 and rows.loc["short_floor", "MVA"] > 0.0
        assert rows.loc["long_cap", "cva_pv"] > 0.0 and abs(rows.loc["long_cap", "dva_pv"]) < 1e-8
        assert rows.loc["short_floor", "dva_pv"] > 0.0 and abs(rows.loc["short_floor", "cva_pv"]) < 1e-8

    @pytest.mark.asyncio
    async def test_monte_carlo_agrees_with_finite_difference(self, system):
        frame = await system.cmd_mc_check(load_run_config(CONFIG_DIR / "table4_mc.yaml"), None)
        assert len(frame) == 6
        assert (frame["npv_diff"].abs() < 0.1).all()
        assert (frame["mva_diff"].abs() < 0.1).all()

    @pytest.mark.asyncio
    async def test_ccp_basis_curve(self, system):
        frame = await system.cmd_basis(load_run_config(CONFIG_DIR / "figure1_basis.yaml"), None)
        basis = frame.set_index("eta_p")["basis_bp"]
        assert basis.loc[0.0] == 0.0
        assert (basis.diff().dropna() > 0).all()
        assert basis.loc[0.1088] == pytest.approx(0.22, rel=0.3)
        assert basis.loc[1.4142] == pytest.approx(2.887, rel=0.3)
        slopes = (basis / basis.index.to_series()).loc[0.5:]
        assert slopes.max() / slopes.min() - 1.0 < 0.02


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
