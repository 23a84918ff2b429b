"""
Command-line entry point for the XVA engine.

    python cli.py calibrate --config configs/calibrate_mnl.yaml --out params.yaml
    python cli.py xva       --config configs/table1_ratings.yaml --out table1.csv
    python cli.py simm      --config configs/table6_simm.yaml --out table6.csv
    python cli.py basis     --config configs/figure1_basis.yaml --out basis.csv
    python cli.py mc-check  --config configs/table4_mc.yaml --out table4.csv
    python cli.py validate  --config configs/table1_ratings.yaml

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

import argparse
import asyncio
import sys
import uuid
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import aiofiles
import pandas as pd
import structlog
import yaml
from rich.console import Console
from rich.table import Table

from dependencies import EngineDependencies, cleanup_dependencies, initialize_dependencies
from exceptions import ConfigError, NoConvergence, NumericalError, XvaError
from im import DeltaVaRIM, SimmEquityIM, funding_spread
from instruments import EquityDynamics, EquityOption, Portfolio, Swap, resolve_atm
from mc_engine import mc_check
from models import RunConfig, dump_run_config, load_run_config, parse_run_config
from ratemodels import ShortRateModel, build_model, calibrate
from settings import configure_logging, load_settings
from xva import (
    BP,
    CollateralMode,
    CurveSet,
    Side,
    bid_ask,
    bid_ask_rates,
    ccp_basis,
    decompose,
    make_context,
    netting_report,
    reports_to_frame,
)

logger = structlog.get_logger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

COMMANDS = ("calibrate", "xva", "simm", "basis", "mc-check", "validate")
RATE_COLUMNS = {"Bid rate": "bid", "Par rate": "par", "Ask rate": "ask"}


async def write_text(path: Path, content: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    async with aiofiles.open(path, "w", encoding="utf-8") as f:
        await f.write(content)


class XvaSystem:
    """Loads settings and shared resources, then runs one command per call."""

    def __init__(self, console: Optional[Console] = None):
        self.settings = None
        self.dependencies: Optional[EngineDependencies] = None
        self.console = console or Console(stderr=True)

    async def initialize(self) -> None:
        """Initialize settings, logging and the worker pool."""
        self.settings = load_settings()
        configure_logging(self.settings)
        self.dependencies = await initialize_dependencies(self.settings, run_id=uuid.uuid4().hex[:8])
        structlog.contextvars.bind_contextvars(run_id=self.dependencies.run_id)
        logger.info("system_initialized", log_level=self.settings.log_level)

    async def cleanup(self) -> None:
        if self.dependencies:
            await cleanup_dependencies(self.dependencies)
        structlog.contextvars.clear_contextvars()

    # ------------------------------------------------------------------
    # shared plumbing

    def grid_overrides(self, config: RunConfig) -> dict:
        overrides = self.dependencies.grid_defaults()
        overrides.update(config.engine.grid.as_overrides())
        return overrides

    def libor_ois_bp(self, config: RunConfig) -> float:
        if config.model is not None and config.model.targets is not None:
            return config.model.targets.libor_ois
        return config.curves[0].libor_ois

    def resolve_model(self, config: RunConfig) -> ShortRateModel:
        """Build the rate model from explicit params, calibrating when only targets are given."""
        section = config.model
        if section is None:
            raise ConfigError("this command needs a model section")
        if section.params is not None:
            return build_model(section.params, section.bounds)
        result = calibrate(
            section.kind,
            section.targets,
            grid_overrides=self.grid_overrides(config),
            bk_mean_rule=section.bk_mean_rule,
            executor=self.dependencies.executor,
        )
        return result.model

    def pricing_setup(self, config: RunConfig, portfolio: Optional[Portfolio] = None):
        """Dynamics, context and ATM-resolved portfolio for the configured instruments."""
        portfolio = portfolio or config.portfolio()
        overrides = self.grid_overrides(config)
        executor = self.dependencies.executor
        if portfolio.kind == "equity":
            dynamics = EquityDynamics.for_option(portfolio.items[0].instrument)
            ctx = make_context(portfolio, dynamics, 0.0, executor=executor, **overrides)
            return dynamics, ctx, portfolio
        model = self.resolve_model(config)
        libor_ois_bp = self.libor_ois_bp(config)
        ctx = make_context(portfolio, model, libor_ois_bp, executor=executor, **overrides)
        portfolio = resolve_atm(portfolio, model, ctx.grid, libor_ois_bp * BP, ctx.zcb)
        return model, ctx, portfolio

    def show(self, frame: pd.DataFrame, title: str, columns: Optional[Sequence[str]] = None) -> None:
        decimals = self.settings.bp_decimals
        table = Table(title=title)
        shown = list(columns or frame.columns)
        for column in shown:
            table.add_column(str(column), justify="left" if frame[column].dtype == object else "right")
        for _, row in frame[shown].iterrows():
            table.add_row(*[f"{v:.{decimals}f}" if isinstance(v, float) else str(v) for v in row])
        self.console.print(table)

    async def write_frame(self, frame: pd.DataFrame, out: Optional[Path]) -> None:
        if out is None:
            return
        await write_text(out, frame.to_csv(index=False, float_format=self.settings.float_format))
        logger.info("report_written", path=str(out), rows=len(frame))

    # ------------------------------------------------------------------
    # commands

    async def cmd_calibrate(self, config: RunConfig, out: Optional[Path]) -> dict:
        """Fit the rate model to its targets and write the parameter file."""
        if config.model is None or config.model.targets is None:
            raise ConfigError("calibrate needs model.targets")
        section = config.model
        result = await asyncio.to_thread(
            calibrate,
            section.kind,
            section.targets,
            self.grid_overrides(config),
            section.bk_mean_rule,
            executor=self.dependencies.executor,
        )
        document = {
            "model": {
                "kind": section.kind,
                "params": result.params.model_dump(),
                "bk_mean_rule": section.bk_mean_rule,
            },
            "residuals_bp": {k: float(v) for k, v in result.residuals_bp.items()},
            "evaluations": result.evaluations,
        }
        residuals = pd.DataFrame([{"target": k, "residual_bp": v} for k, v in result.residuals_bp.items()])
        self.show(residuals, f"{section.kind.upper()} calibration residuals")
        if out is not None:
            await write_text(out, yaml.safe_dump(document, sort_keys=False))
            logger.info("params_written", path=str(out))
        return document

    async def cmd_xva(self, config: RunConfig, out: Optional[Path]) -> pd.DataFrame:
        """One XVA row per curve set, or netting rows per curve set."""
        dynamics, ctx, portfolio = await asyncio.to_thread(self.pricing_setup, config)
        options = config.xva
        if options.rates and (len(portfolio.items) != 1 or not isinstance(portfolio.items[0].instrument, Swap)):
            raise ConfigError("xva.rates needs a portfolio of one swap")

        if options.netting:
            batches = await asyncio.gather(
                *(
                    asyncio.to_thread(netting_report, portfolio, dynamics, curves, config.im, options.mode, ctx)
                    for curves in config.curves
                )
            )
            frames = []
            for curves, reports in zip(config.curves, batches):
                frame = reports_to_frame(reports, self.settings.bp_decimals)
                frame.insert(0, "curves", curves.name)
                frames.append(frame)
            frame = pd.concat(frames, ignore_index=True)
        else:
            reports = await asyncio.gather(
                *(
                    asyncio.to_thread(decompose, portfolio, dynamics, curves, config.im, options.mode, options.side, ctx)
                    for curves in config.curves
                )
            )
            frame = reports_to_frame(reports, self.settings.bp_decimals)

        shown = ["label", "NPV", "CVA", "DVA", "CFA", "DFA", "MVA", "TVA"]
        if options.rates:
            frame = await self._with_rates(frame, config, dynamics, ctx, portfolio)
            shown += list(RATE_COLUMNS)
        self.show(frame, "XVA", shown)
        await self.write_frame(frame, out)
        return frame

    async def _with_rates(self, frame: pd.DataFrame, config: RunConfig, model, ctx, portfolio: Portfolio) -> pd.DataFrame:
        """Append the IM-adjusted bid, par and ask fixed rates (bp) per curve set."""
        swap = portfolio.items[0].instrument
        quotes = await asyncio.gather(
            *(
                asyncio.to_thread(bid_ask_rates, swap, model, curves, config.im, config.xva.mode, ctx)
                for curves in config.curves
            )
        )
        frame = frame.copy()
        for column, field in RATE_COLUMNS.items():
            frame[column] = [round(getattr(q, field) / BP, self.settings.bp_decimals) for q in quotes]
        return frame

    def _simm_row(self, config: RunConfig, scenario, base: SimmEquityIM, short: tuple, long: tuple) -> Dict[str, float]:
        opts = config.simm
        curves = CurveSet(name=scenario.name, libor_ois=0.0).with_funding(scenario)
        mode = CollateralMode.FULL_VM

        def mva(spec: SimmEquityIM, setup: tuple) -> float:
            dynamics, ctx, portfolio = setup
            return decompose(portfolio, dynamics, curves, spec, mode, Side.BID, ctx).mva

        dynamics, ctx, portfolio = short
        quotes = bid_ask(portfolio, dynamics, curves, base, ctx)
        return {
            "scenario": scenario.name,
            "Sprd (%)": funding_spread(scenario) * 100.0,
            "MVA-dgv": mva(base, short),
            "MVA-gv": mva(base.model_copy(update={"include_delta": False}), short),
            f"MVA-M{opts.allocated_multiplier:g}": mva(base.model_copy(update={"allocated_multiplier": opts.allocated_multiplier}), short),
            f"MVA {opts.long_expiry:g}y dgv": mva(base, long),
            "Bid": quotes["bid"],
            "Ask": quotes["ask"],
            "Riskfree": quotes["riskfree"],
        }

    async def cmd_simm(self, config: RunConfig, out: Optional[Path]) -> pd.DataFrame:
        """Equity option MVA under SIMM across IM funding scenarios."""
        if config.simm is None:
            raise ConfigError("simm needs a simm section")
        if not config.is_equity:
            raise ConfigError("simm needs an equity option instrument")
        option: EquityOption = config.instruments[0].instrument
        base = config.im if isinstance(config.im, SimmEquityIM) else SimmEquityIM.from_preset(config.simm.risk_weight)

        short = self.pricing_setup(config)
        long_portfolio = Portfolio.single(option.model_copy(update={"expiry": config.simm.long_expiry}))
        long = self.pricing_setup(config, long_portfolio)

        rows = await asyncio.gather(
            *(asyncio.to_thread(self._simm_row, config, scenario, base, short, long) for scenario in config.simm.scenarios)
        )
        frame = pd.DataFrame(rows)
        self.show(frame, "Equity option MVA")
        await self.write_frame(frame, out)
        return frame

    async def cmd_basis(self, config: RunConfig, out: Optional[Path]) -> pd.DataFrame:
        """Sweep the allocated multiplier and emit the inter-CCP basis curve."""
        if config.basis is None:
            raise ConfigError("basis needs a basis section")
        opts = config.basis
        receiver = Portfolio.single(Swap(direction="receiver", maturity=opts.tenor))
        model, ctx, _ = await asyncio.to_thread(self.pricing_setup, config, receiver)
        im_base = DeltaVaRIM.from_preset(opts.mpr_preset)
        libor_ois_bp = self.libor_ois_bp(config)

        points = await asyncio.gather(
            *(
                asyncio.to_thread(ccp_basis, opts.tenor, model, eta, opts.funding, im_base, libor_ois_bp, ctx)
                for eta in opts.eta_values
            )
        )
        frame = pd.DataFrame(
            [
                {
                    "eta_p": p.eta_p,
                    "receiver_mva_bp": p.receiver_mva_bp,
                    "payer_mva_bp": p.payer_mva_bp,
                    "basis_bp": p.basis_bp,
                }
                for p in points
            ]
        )
        self.show(frame, f"{opts.tenor:g}y inter-CCP basis")
        await self.write_frame(frame, out)
        return frame

    async def cmd_mc_check(self, config: RunConfig, out: Optional[Path]) -> pd.DataFrame:
        """Finite-difference against Monte-Carlo NPV and MVA per curve set."""
        model, ctx, portfolio = await asyncio.to_thread(self.pricing_setup, config)
        if portfolio.kind != "rate":
            raise ConfigError("mc-check needs rate instruments")
        frame = await asyncio.to_thread(
            mc_check, portfolio, model, config.curves, config.im, config.engine.mc, config.xva.mode, ctx
        )
        self.show(frame, "FD vs MC (bp)")
        await self.write_frame(frame, out)
        return frame

    async def cmd_validate(self, config: RunConfig, out: Optional[Path]) -> str:
        """Re-serialize the config and check that it parses back to itself."""
        text = dump_run_config(config)
        if parse_run_config(yaml.safe_load(text)) != config:
            raise ConfigError("config does not survive a serialize/parse round trip")
        if out is not None:
            await write_text(out, text)
        self.console.print("[green]config OK[/green]")
        return text

    async def run(self, command: str, config_path: Path, out: Optional[Path]):
        config = load_run_config(config_path)
        logger.info("command_started", command=command, config=str(config_path))
        handler = getattr(self, f"cmd_{command.replace('-', '_')}")
        result = await handler(config, out)
        logger.info("command_finished", command=command)
        return result


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cli.py", description="One-factor XVA and MVA PDE engine")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, type=Path, help="YAML run config")
        cmd.add_argument("--out", type=Path, default=None, help="Output path")
    return parser


async def main(argv: Optional[List[str]] = None) -> int:
    """Run one command and map failures onto exit codes."""
    args = build_parser().parse_args(argv)
    system = XvaSystem()
    try:
        await system.initialize()
        await system.run(args.command, args.config, args.out)
    except ConfigError as e:
        logger.error("config_error", error=str(e))
        system.console.print(f"[red]configuration error:[/red] {e}")
        return EXIT_CONFIG
    except NoConvergence as e:
        logger.error("no_convergence", error=str(e), step=e.step, residual=e.residual, residuals=e.residuals)
        system.console.print(f"[red]numerical failure:[/red] {e}")
        return EXIT_NUMERICAL
    except NumericalError as e:
        logger.error("numerical_error", error=str(e))
        system.console.print(f"[red]numerical failure:[/red] {e}")
        return EXIT_NUMERICAL
    except ValueError as e:
        # settings failures surface as ValueError from load_settings
        logger.error("settings_error", error=str(e))
        system.console.print(f"[red]configuration error:[/red] {e}")
        return EXIT_CONFIG
    except XvaError as e:
        logger.error("engine_error", error=str(e))
        return 1
    finally:
        await system.cleanup()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(asyncio.run(main()))
