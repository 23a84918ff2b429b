"""
All-in pricing and XVA decomposition on top of the PDE engine.

Party B prices; party C is the counterparty. Party rates ride over the
LIBOR short rate: r_b = rho + cds_b + basis_b and r_c = rho + cds_c + basis_c.
Uncollateralized trades discount at the liability holder's rate, r_c where
V >= 0 and r_b where V < 0. Fully variation-margined trades discount at the
risk-free rate r = rho - LIBOR-OIS.
"""

import math
from concurrent.futures import Executor, ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import structlog
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import brentq

from exceptions import ConfigError, DegenerateAnnuity, NoConvergence
from im import DeltaVaRIM, ExogenousIM, FundingScenario, SimmEquityIM, delta_im, funding_spread, im_rule, scale_im, simm_equity_im
from instruments import EquityDynamics, Portfolio, Swap, annuity, par_swap_rate, portfolio_cashflows, resolve_atm
from pde_engine import GridSpec, PDEProblem, ValueSurface, solve
from ratemodels import ShortRateModel, ZcbProvider

logger = structlog.get_logger(__name__)

BP = 1e-4
REPORT_COLUMNS = ["NPV", "CVA", "DVA", "CFA", "DFA", "MVA", "TVA"]
PV_FIELDS = ("npv", "riskfree", "cva", "dva", "cfa", "dfa", "mva", "tva", "residual", "ois_basis")


class CollateralMode(str, Enum):
    UNCOLLATERALIZED = "uncollateralized"
    FULL_VM = "full_vm"


class Side(str, Enum):
    BID = "bid"
    ASK = "ask"


class CurveSet(BaseModel):
    """Deterministic spreads in bp over the LIBOR short rate."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = Field(default="curves", description="Label used in reports")
    libor_ois: float = Field(default=13.0, ge=0, description="LIBOR-OIS spread, r = rho - libor_ois (bp)")
    cds_b: float = Field(default=0.0, ge=0, description="Party B CDS spread (bp)")
    basis_b: float = Field(default=0.0, ge=0, description="Party B funding basis (bp)")
    cds_c: float = Field(default=0.0, ge=0, description="Party C CDS spread (bp)")
    basis_c: float = Field(default=0.0, ge=0, description="Party C funding basis (bp)")
    s_l: float = Field(default=0.0, ge=0, description="IM funding spread (bp)")

    @property
    def spread_b(self) -> float:
        return (self.cds_b + self.basis_b) * BP

    @property
    def spread_c(self) -> float:
        return (self.cds_c + self.basis_c) * BP

    @property
    def im_spread(self) -> float:
        return self.s_l * BP

    def only(self, *active: str) -> "CurveSet":
        """Copy with every party spread and s_l zeroed except ``active``."""
        update = {k: 0.0 for k in ("cds_b", "basis_b", "cds_c", "basis_c", "s_l") if k not in active}
        return self.model_copy(update=update)

    def with_funding(self, scenario: FundingScenario) -> "CurveSet":
        return self.model_copy(update={"s_l": funding_spread(scenario) / BP})


@dataclass(frozen=True)
class XVAReport:
    """Present values with their yield-value view.

    ``riskfree`` is V*, the zero-spread, zero-IM value discounted at the
    risk-free rate. The uncollateralized ladder is attributed from a
    zero-spread base discounted at LIBOR; ``ois_basis`` is riskfree minus
    that base and is zero for variation-margined or equity books. The
    identities tva = cva - dva + cfa - dfa + mva and
    npv = riskfree - ois_basis - tva - residual hold by construction.
    """

    label: str
    npv: float
    riskfree: float
    cva: float
    dva: float
    cfa: float
    dfa: float
    mva: float
    tva: float
    residual: float
    ois_basis: float = 0.0
    annuity: float = 1.0
    units: str = "bp"
    stderr: Optional[Dict[str, float]] = None

    @classmethod
    def from_ladder(cls, label: str, values: Dict[str, float], annuity_value: float, units: str = "bp") -> "XVAReport":
        base, full = values["base"], values["full"]
        riskfree = values.get("riskfree", base)
        cva = base - values["cva"]
        dva = values["dva"] - base
        cfa = base - values["cfa"]
        dfa = values["dfa"] - base
        mva = values["noim"] - full
        tva = cva - dva + cfa - dfa + mva
        return cls(
            label=label,
            npv=full,
            riskfree=riskfree,
            cva=cva,
            dva=dva,
            cfa=cfa,
            dfa=dfa,
            mva=mva,
            tva=tva,
            residual=(base - full) - tva,
            ois_basis=riskfree - base,
            annuity=annuity_value,
            units=units,
        )

    @classmethod
    def zero(cls, label: str, annuity_value: float = 1.0, units: str = "bp") -> "XVAReport":
        values = dict.fromkeys(PV_FIELDS, 0.0)
        return cls(label=label, annuity=annuity_value, units=units, **values)

    def yv(self, pv: float) -> float:
        return pv / self.annuity / BP if self.units == "bp" else pv

    def combine(self, other: "XVAReport", label: str, sign: float = 1.0) -> "XVAReport":
        """Field-wise self + sign * other, keeping this report's annuity."""
        values = {f: getattr(self, f) + sign * getattr(other, f) for f in PV_FIELDS}
        return XVAReport(label=label, annuity=self.annuity, units=self.units, **values)

    def to_row(self) -> Dict[str, float]:
        row: Dict[str, float] = {"label": self.label}
        for column in REPORT_COLUMNS:
            row[column] = self.yv(getattr(self, column.lower()))
        row["residual"] = self.yv(self.residual)
        row["ois_basis"] = self.yv(self.ois_basis)
        for name in PV_FIELDS:
            row[f"{name}_pv"] = getattr(self, name)
        row["annuity"] = self.annuity
        if self.stderr:
            for name, value in self.stderr.items():
                row[f"{name}_stderr_pv"] = value
        return row


def reports_to_frame(reports: Sequence[XVAReport], decimals: int = 2) -> pd.DataFrame:
    """Table layout: NPV, CVA, DVA, CFA, DFA, MVA, TVA in yield value, raw PVs alongside."""
    frame = pd.DataFrame([r.to_row() for r in reports])
    rounded = REPORT_COLUMNS + ["residual", "ois_basis"]
    frame[rounded] = frame[rounded].round(decimals)
    return frame


@dataclass
class PricingContext:
    """Dynamics, grid and bond surfaces shared by every solve of one run."""

    dynamics: object
    grid: GridSpec
    zcb: Optional[ZcbProvider] = None
    executor: Optional[Executor] = None

    @property
    def is_rate(self) -> bool:
        return isinstance(self.dynamics, ShortRateModel)


def make_context(
    portfolio: Portfolio,
    dynamics,
    libor_ois_bp: float = 13.0,
    grid: Optional[GridSpec] = None,
    executor: Optional[Executor] = None,
    **grid_overrides,
) -> PricingContext:
    """Build the grid (model default bounds) and prepare bond surfaces."""
    if portfolio.kind == "equity":
        if not isinstance(dynamics, EquityDynamics):
            raise ConfigError("equity portfolio needs equity dynamics")
        grid = grid or dynamics.make_grid(horizon=portfolio.horizon, **grid_overrides)
        return PricingContext(dynamics=dynamics, grid=grid, executor=executor)
    if not isinstance(dynamics, ShortRateModel):
        raise ConfigError("rate portfolio needs a short-rate model")
    grid = grid or dynamics.make_grid(**grid_overrides)
    zcb = ZcbProvider(dynamics, grid, libor_ois_bp * BP)
    zcb.prepare(portfolio.accruals() + [0.25])
    return PricingContext(dynamics=dynamics, grid=grid, zcb=zcb, executor=executor)


@contextmanager
def _pool(executor: Optional[Executor], workers: int = 7) -> Iterator[Executor]:
    if executor is not None:
        yield executor
        return
    pool = ThreadPoolExecutor(max_workers=workers)
    try:
        yield pool
    finally:
        pool.shutdown(wait=True)


def build_problem(
    portfolio: Portfolio,
    ctx: PricingContext,
    curves: CurveSet,
    im_spec=None,
    mode: CollateralMode = CollateralMode.UNCOLLATERALIZED,
    side: Side = Side.BID,
) -> PDEProblem:
    """Assemble the liability-side PDE for one curve configuration."""
    dyn = ctx.dynamics
    if not portfolio.is_resolved():
        raise ConfigError("portfolio has unresolved ATM rates; call resolve_atm first")
    terminal, jumps, horizon = portfolio_cashflows(portfolio, dyn, ctx.zcb)
    libor_ois = curves.libor_ois * BP if ctx.is_rate else 0.0

    discount_neg = None
    if CollateralMode(mode) is CollateralMode.FULL_VM:
        discount_pos = dyn.discount(-libor_ois)
    else:
        r_c, r_b = dyn.discount(curves.spread_c), dyn.discount(curves.spread_b)
        # on the ask side the roles of the two liability rates swap
        discount_pos, discount_neg = (r_c, r_b) if Side(side) is Side.BID else (r_b, r_c)
        if curves.spread_b == curves.spread_c:
            discount_neg = None

    rule, cost = None, 0.0
    if im_spec is not None and curves.s_l > 0:
        rule = im_rule(im_spec, expiry=horizon)
        cost = curves.im_spread if Side(side) is Side.BID else -curves.im_spread

    return PDEProblem(
        drift=dyn.drift,
        vol=dyn.vol,
        discount_pos=discount_pos,
        discount_neg=discount_neg,
        terminal=terminal,
        horizon=horizon,
        jumps=jumps,
        im_rule=rule,
        im_cost=cost,
        boundary_convexity=dyn.boundary_convexity,
        value_scale=portfolio.notional_scale,
        name=f"{curves.name}:{CollateralMode(mode).value}:{Side(side).value}",
    )


def price_all_in(
    portfolio: Portfolio,
    dynamics,
    curves: CurveSet,
    im_spec=None,
    mode: CollateralMode = CollateralMode.UNCOLLATERALIZED,
    side: Side = Side.BID,
    ctx: Optional[PricingContext] = None,
    keep_slices: bool = False,
) -> ValueSurface:
    """
    Solve the all-in PDE with discount switching and the IM funding term.

    Args:
        portfolio: Resolved portfolio
        dynamics: Short-rate model or equity dynamics
        curves: Party spreads and IM funding spread
        im_spec: Exogenous, delta-VaR or SIMM equity IM spec
        mode: Uncollateralized or fully variation-margined
        side: Bid deducts the IM funding cost, ask adds it
        ctx: Prepared grid and bond surfaces, built when omitted

    Returns:
        ValueSurface at t=0
    """
    ctx = ctx or make_context(portfolio, dynamics, curves.libor_ois)
    problem = build_problem(portfolio, ctx, curves, im_spec, mode, side)
    return solve(problem, ctx.grid, keep_slices=keep_slices, log_state=dynamics.log_state)


def ladder_curves(curves: CurveSet, mode: CollateralMode) -> Dict[str, CurveSet]:
    """Curve shifts of the attribution ladder."""
    if CollateralMode(mode) is CollateralMode.FULL_VM:
        return {"base": curves.only(), "noim": curves.only(), "full": curves}
    return {
        "base": curves.only(),
        "cva": curves.only("cds_c"),
        "dva": curves.only("cds_b"),
        "cfa": curves.only("basis_c"),
        "dfa": curves.only("basis_b"),
        "noim": curves.model_copy(update={"s_l": 0.0}),
        "full": curves,
    }


def has_ois_basis(ctx: PricingContext, curves: CurveSet, mode: CollateralMode) -> bool:
    """Whether the attribution base (LIBOR discounting) differs from the risk-free value."""
    return ctx.is_rate and CollateralMode(mode) is CollateralMode.UNCOLLATERALIZED and curves.libor_ois > 0


def report_annuity(portfolio: Portfolio, ctx: PricingContext, curves: CurveSet) -> Tuple[float, str]:
    """Annuity of the longest-tenor fixed leg for rate books; price units for equity."""
    if not ctx.is_rate:
        return 1.0, "price"
    start = min(item.instrument.start for item in portfolio.items)
    value = annuity(ctx.dynamics, start, portfolio.horizon, 2, ctx.grid, curves.libor_ois * BP)
    return value, "bp"


def decompose(
    portfolio: Portfolio,
    dynamics,
    curves: CurveSet,
    im_spec=None,
    mode: CollateralMode = CollateralMode.UNCOLLATERALIZED,
    side: Side = Side.BID,
    ctx: Optional[PricingContext] = None,
    label: Optional[str] = None,
    annuity_value: Optional[float] = None,
) -> XVAReport:
    """
    Run the solve ladder and attribute the all-in value.

    CVA, DVA, CFA and DFA switch on one party spread at a time from the
    zero-spread base; MVA is the IM-free minus the all-in value with every
    spread active. Cross terms land in ``residual``. Uncollateralized rate
    books add a variation-margined zero-spread solve for ``riskfree``.
    """
    ctx = ctx or make_context(portfolio, dynamics, curves.libor_ois)
    legs = {name: (shifted, mode) for name, shifted in ladder_curves(curves, mode).items()}
    if has_ois_basis(ctx, curves, mode):
        legs["riskfree"] = (curves.only(), CollateralMode.FULL_VM)
    with _pool(ctx.executor) as pool:
        futures = {
            name: pool.submit(
                lambda c, m: price_all_in(portfolio, dynamics, c, im_spec, m, side, ctx).value_at(dynamics.x0),
                shifted,
                leg_mode,
            )
            for name, (shifted, leg_mode) in legs.items()
        }
        values = {name: f.result() for name, f in futures.items()}
    for name in ("cva", "dva", "cfa", "dfa"):
        values.setdefault(name, values["base"])

    if annuity_value is None:
        annuity_value, units = report_annuity(portfolio, ctx, curves)
    else:
        units = "bp" if ctx.is_rate else "price"
    report = XVAReport.from_ladder(label or curves.name, values, annuity_value, units)
    logger.info(
        "xva_decomposed",
        label=report.label,
        npv=report.yv(report.npv),
        cva=report.yv(report.cva),
        mva=report.yv(report.mva),
        residual=report.yv(report.residual),
        units=units,
    )
    return report


def yield_value(pv: float, model: ShortRateModel, tenor: float, grid: Optional[GridSpec] = None, libor_ois_bp: float = 13.0) -> float:
    """PV as a running spread in bp over the risk-free fixed-leg annuity."""
    grid = grid or model.make_grid()
    value = annuity(model, 0.0, tenor, 2, grid, libor_ois_bp * BP)
    if value <= 0:
        raise DegenerateAnnuity(f"annuity {value} for tenor {tenor}")
    return pv / value / BP


def bid_ask(
    portfolio: Portfolio,
    dynamics,
    curves: CurveSet,
    im_spec,
    ctx: Optional[PricingContext] = None,
) -> Dict[str, float]:
    """Variation-margined bid, risk-free and ask values at the current state."""
    ctx = ctx or make_context(portfolio, dynamics, curves.libor_ois)
    x0 = dynamics.x0
    legs = {
        "bid": (curves, Side.BID),
        "riskfree": (curves.only(), Side.BID),
        "ask": (curves, Side.ASK),
    }
    with _pool(ctx.executor, workers=3) as pool:
        futures = {
            name: pool.submit(
                lambda c, s: price_all_in(portfolio, dynamics, c, im_spec, CollateralMode.FULL_VM, s, ctx).value_at(x0),
                c,
                s,
            )
            for name, (c, s) in legs.items()
        }
        return {name: f.result() for name, f in futures.items()}


@dataclass(frozen=True)
class SwapQuote:
    """Par rate and the IM-adjusted fixed rates a dealer quotes on one swap (decimals)."""

    label: str
    bid: float
    par: float
    ask: float

    @property
    def spread_bp(self) -> float:
        return (self.ask - self.bid) / BP


def _zero_value_rate(value: Callable[[float], float], par: float, slope: float, xtol: float) -> float:
    """Root of ``value`` near ``par``; ``slope`` is its approximate derivative in the rate."""
    at_par = value(par)
    if at_par == 0.0:
        return par
    step = abs(at_par / slope)
    for _ in range(12):
        step *= 2.0
        other = par + math.copysign(step, -at_par / slope)
        if value(other) * at_par <= 0.0:
            lo, hi = sorted((par, other))
            return float(brentq(value, lo, hi, xtol=xtol))
    raise NoConvergence(f"no sign change of the swap value within {step / BP:.1f} bp of par {par / BP:.2f} bp")


def bid_ask_rates(
    swap: Swap,
    model: ShortRateModel,
    curves: CurveSet,
    im_spec,
    mode: CollateralMode = CollateralMode.FULL_VM,
    ctx: Optional[PricingContext] = None,
    label: Optional[str] = None,
    xtol: float = 1e-10,
) -> SwapQuote:
    """
    Fixed rates at which the dealer's IM-adjusted value of the swap is zero.

    The ask is the rate the dealer needs to receive and the bid the rate it
    can pay once its IM funding cost is deducted; on the client's side these
    are the rates where the ask-side value is zero. The value is close to
    affine in the fixed rate, so the risk-free annuity seeds the bracket.

    Raises:
        NoConvergence: if no bracket around par is found
    """
    template = Portfolio.single(swap.model_copy(update={"fixed_rate": None}))
    ctx = ctx or make_context(template, model, curves.libor_ois)
    libor_ois = curves.libor_ois * BP
    par = par_swap_rate(model, swap.tenor, ctx.grid, libor_ois, swap.start, swap.fixed_freq, swap.float_freq, ctx.zcb)
    slope = swap.notional * annuity(model, swap.start, swap.maturity, swap.fixed_freq, ctx.grid, libor_ois)

    def valuer(direction: str) -> Callable[[float], float]:
        @lru_cache(maxsize=None)
        def value(rate: float) -> float:
            portfolio = Portfolio.single(swap.model_copy(update={"direction": direction, "fixed_rate": rate}))
            return price_all_in(portfolio, model, curves, im_spec, mode, Side.BID, ctx).value_at(model.x0)

        return value

    with _pool(ctx.executor, workers=2) as pool:
        ask = pool.submit(_zero_value_rate, valuer("receiver"), par, slope, xtol)
        bid = pool.submit(_zero_value_rate, valuer("payer"), par, -slope, xtol)
        quote = SwapQuote(label=label or curves.name, bid=bid.result(), par=par, ask=ask.result())
    logger.info("swap_rates_quoted", label=quote.label, bid_bp=quote.bid / BP, par_bp=par / BP, ask_bp=quote.ask / BP)
    return quote


def initial_margin_at_inception(portfolio: Portfolio, dynamics, im_spec, ctx: Optional[PricingContext] = None) -> float:
    """Model IM today at unit multipliers, from the risk-free surface's Greeks."""
    ctx = ctx or make_context(portfolio, dynamics)
    surface = price_all_in(portfolio, dynamics, CurveSet(), None, CollateralMode.FULL_VM, Side.BID, ctx)
    x0 = dynamics.x0
    v_x = float(np.interp(x0, surface.x, surface.delta))
    v_xx = float(np.interp(x0, surface.x, surface.gamma))
    vol = float(dynamics.vol(np.array([x0]))[0])
    if isinstance(im_spec, DeltaVaRIM):
        unit = im_spec.model_copy(update={"eta_plus": 1.0, "eta_minus": 1.0})
        return float(delta_im(v_x, vol, unit))
    if isinstance(im_spec, SimmEquityIM):
        unit = im_spec.model_copy(update={"eta": 1.0, "allocated_multiplier": 1.0})
        spot = math.exp(x0)
        pieces = simm_equity_im(spot, v_x / spot, (v_xx - v_x) / spot**2, vol, portfolio.horizon, unit)
        return float(sum(pieces))
    if isinstance(im_spec, ExogenousIM):
        return im_spec.profile(0.0)
    raise ConfigError(f"unsupported IM spec {type(im_spec).__name__}")


def exogenous_mva(
    portfolio: Portfolio,
    dynamics,
    curves: CurveSet,
    profile: ExogenousIM,
    mode: CollateralMode = CollateralMode.UNCOLLATERALIZED,
    ctx: Optional[PricingContext] = None,
) -> float:
    """MVA of a supplied IM profile: the liability-side discounted funding cost."""
    ctx = ctx or make_context(portfolio, dynamics, curves.libor_ois)
    x0 = dynamics.x0
    without = price_all_in(portfolio, dynamics, curves.model_copy(update={"s_l": 0.0}), None, mode, Side.BID, ctx)
    with_im = price_all_in(portfolio, dynamics, curves, profile, mode, Side.BID, ctx)
    return without.value_at(x0) - with_im.value_at(x0)


@dataclass(frozen=True)
class BasisPoint:
    eta_p: float
    receiver_mva_bp: float
    payer_mva_bp: float

    @property
    def basis_bp(self) -> float:
        return self.receiver_mva_bp + self.payer_mva_bp


def ccp_basis(
    tenor: float,
    model: ShortRateModel,
    eta_p: float,
    funding: FundingScenario,
    im_base: Optional[DeltaVaRIM] = None,
    libor_ois_bp: float = 13.0,
    ctx: Optional[PricingContext] = None,
) -> BasisPoint:
    """
    Swap-rate basis between two CCPs from dual IM funding of a back-to-back hedge.

    The dealer receives fixed at one CCP and pays fixed at the other; both legs
    are variation-margined and share the allocated multiplier ``eta_p``.
    """
    if eta_p < 0:
        raise ConfigError("eta_p must be nonnegative")
    if eta_p == 0:
        return BasisPoint(eta_p=0.0, receiver_mva_bp=0.0, payer_mva_bp=0.0)
    base = im_base or DeltaVaRIM.from_preset("ten_day")
    spec = scale_im(base.model_copy(update={"eta_plus": 1.0, "eta_minus": 1.0}), eta_p)
    curves = CurveSet(name=f"eta_{eta_p:g}", libor_ois=libor_ois_bp).with_funding(funding)

    receiver = Portfolio.single(Swap(direction="receiver", maturity=tenor))
    ctx = ctx or make_context(receiver, model, libor_ois_bp)
    receiver = resolve_atm(receiver, model, ctx.grid, libor_ois_bp * BP, ctx.zcb)
    rate = receiver.items[0].instrument.fixed_rate
    payer = Portfolio.single(Swap(direction="payer", maturity=tenor, fixed_rate=rate))

    reports = [
        decompose(p, model, curves, spec, CollateralMode.FULL_VM, Side.BID, ctx, label=name)
        for name, p in (("receiver", receiver), ("payer", payer))
    ]
    point = BasisPoint(eta_p=eta_p, receiver_mva_bp=reports[0].yv(reports[0].mva), payer_mva_bp=reports[1].yv(reports[1].mva))
    logger.info("ccp_basis", eta_p=eta_p, basis_bp=point.basis_bp)
    return point


def netting_report(
    portfolio: Portfolio,
    dynamics,
    curves: CurveSet,
    im_spec=None,
    mode: CollateralMode = CollateralMode.UNCOLLATERALIZED,
    ctx: Optional[PricingContext] = None,
) -> List[XVAReport]:
    """
    Standalone rows, their sum, the portfolio row and portfolio minus sum.

    Every row is expressed over the portfolio's (longest-tenor) annuity so the
    rows add up in yield value too.
    """
    ctx = ctx or make_context(portfolio, dynamics, curves.libor_ois)
    annuity_value, _ = report_annuity(portfolio, ctx, curves)
    rows: List[XVAReport] = []
    for i, item in enumerate(portfolio.items):
        single = Portfolio(items=[item])
        label = item.label or f"{type(item.instrument).__name__.lower()}_{i + 1}"
        rows.append(decompose(single, dynamics, curves, im_spec, mode, Side.BID, ctx, label, annuity_value))

    total = XVAReport.zero("Sum", annuity_value, rows[0].units)
    for row in rows:
        total = total.combine(row, "Sum")
    whole = decompose(portfolio, dynamics, curves, im_spec, mode, Side.BID, ctx, "Portf", annuity_value)
    difference = whole.combine(total, "Difference", sign=-1.0)
    return rows + [total, whole, difference]
