"""
Instrument descriptors, schedules and cashflow jump rules.

Values are seen from party B. A cashflow received at date t adds to the value
just before t: V(t-) = V(t+) + amount. Floating coupons and caplets fix at the
period start and are valued there with the state-dependent bond P(t, t + d).
"""

import math
from dataclasses import dataclass, field
from typing import Annotated, Callable, Dict, List, Literal, Optional, Protocol, Tuple, Union

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from exceptions import ConfigError, DegenerateAnnuity, InvalidTenor
from pde_engine import GridSpec, JumpFunction, PDEProblem, solve
from ratemodels import ShortRateModel, ZcbProvider

logger = structlog.get_logger(__name__)

ALLOWED_FREQS = (1, 2, 4, 12)
TENOR_EPS = 1e-9


class BondLookup(Protocol):
    def bond(self, reset: float, pay: float, state: np.ndarray) -> np.ndarray: ...


def build_schedule(start: float, maturity: float, freq: int) -> List[Tuple[float, float, float]]:
    """
    Contiguous (reset, pay, accrual) periods covering [start, maturity].

    Raises:
        InvalidTenor: if maturity - start is not a whole number of periods
    """
    if maturity <= start:
        raise InvalidTenor(start, maturity, freq)
    accrual = 1.0 / freq
    periods = (maturity - start) * freq
    count = round(periods)
    if count < 1 or abs(periods - count) > 1e-6:
        raise InvalidTenor(start, maturity, freq)
    return [(start + i * accrual, start + (i + 1) * accrual, accrual) for i in range(count)]


@dataclass(frozen=True)
class CashflowEvent:
    date: float
    leg: Literal["fixed", "float", "caplet"]
    reset: float
    pay: float
    accrual: float


class Swap(BaseModel):
    """Fixed-for-floating swap. ``fixed_rate`` of None means at the money."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    type: Literal["swap"] = "swap"
    notional: float = Field(default=1.0, gt=0, description="Notional amount")
    fixed_rate: Optional[float] = Field(default=None, description="Fixed rate; None resolves to par")
    direction: Literal["payer", "receiver"] = Field(..., description="Payer or receiver of fixed")
    start: float = Field(default=0.0, ge=0, description="Start date (years)")
    maturity: float = Field(..., gt=0, description="Maturity (years)")
    fixed_freq: int = Field(default=2, description="Fixed payments per year")
    float_freq: int = Field(default=4, description="Floating payments per year")

    @field_validator("fixed_freq", "float_freq")
    @classmethod
    def _check_freq(cls, v: int) -> int:
        if v not in ALLOWED_FREQS:
            raise ValueError(f"frequency must be one of {ALLOWED_FREQS}")
        return v

    @model_validator(mode="after")
    def _check_dates(self) -> "Swap":
        build_schedule(self.start, self.maturity, self.fixed_freq)
        build_schedule(self.start, self.maturity, self.float_freq)
        return self

    @property
    def sign(self) -> float:
        return 1.0 if self.direction == "receiver" else -1.0

    @property
    def tenor(self) -> float:
        return self.maturity - self.start

    def events(self) -> List[CashflowEvent]:
        fixed = [CashflowEvent(pay, "fixed", reset, pay, acc) for reset, pay, acc in build_schedule(self.start, self.maturity, self.fixed_freq)]
        floating = [CashflowEvent(reset, "float", reset, pay, acc) for reset, pay, acc in build_schedule(self.start, self.maturity, self.float_freq)]
        return fixed + floating


class CapFloor(BaseModel):
    """Cap or floor. The caplet fixing at the start date is excluded."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    type: Literal["capfloor"] = "capfloor"
    notional: float = Field(default=1.0, gt=0)
    strike: Optional[float] = Field(default=None, gt=0, description="Strike; None resolves to par")
    kind: Literal["cap", "floor"] = Field(...)
    position: Literal["long", "short"] = Field(default="long")
    start: float = Field(default=0.0, ge=0)
    maturity: float = Field(..., gt=0)
    freq: int = Field(default=4)

    @field_validator("freq")
    @classmethod
    def _check_freq(cls, v: int) -> int:
        if v not in ALLOWED_FREQS:
            raise ValueError(f"frequency must be one of {ALLOWED_FREQS}")
        return v

    @model_validator(mode="after")
    def _check_dates(self) -> "CapFloor":
        build_schedule(self.start, self.maturity, self.freq)
        return self

    @property
    def sign(self) -> float:
        return 1.0 if self.position == "long" else -1.0

    @property
    def tenor(self) -> float:
        return self.maturity - self.start

    def events(self) -> List[CashflowEvent]:
        return [
            CashflowEvent(reset, "caplet", reset, pay, acc)
            for reset, pay, acc in build_schedule(self.start, self.maturity, self.freq)[1:]
        ]


class EquityOption(BaseModel):
    """European option on a lognormal underlier."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    type: Literal["equity_option"] = "equity_option"
    spot: float = Field(..., gt=0, description="Spot price S0")
    strike: float = Field(..., gt=0, description="Strike K")
    expiry: float = Field(..., gt=0, description="Expiry (years)")
    kind: Literal["call", "put"] = Field(default="call")
    position: Literal["long", "short"] = Field(default="long")
    sigma: float = Field(..., gt=0, description="Lognormal volatility")
    rate: float = Field(..., description="Risk-free rate")

    @property
    def sign(self) -> float:
        return 1.0 if self.position == "long" else -1.0

    @property
    def maturity(self) -> float:
        return self.expiry

    @property
    def tenor(self) -> float:
        return self.expiry

    def events(self) -> List[CashflowEvent]:
        return []


Instrument = Annotated[Union[Swap, CapFloor, EquityOption], Field(discriminator="type")]


def instrument_kind(instrument) -> str:
    return "equity" if isinstance(instrument, EquityOption) else "rate"


class PortfolioItem(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    instrument: Instrument
    weight: float = Field(default=1.0, description="Position multiplier")
    label: Optional[str] = Field(default=None, description="Display name in reports")


class Portfolio(BaseModel):
    """Weighted instruments sharing one risk factor."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    items: List[PortfolioItem] = Field(..., min_length=1)

    @model_validator(mode="after")
    def _single_factor(self) -> "Portfolio":
        kinds = {instrument_kind(item.instrument) for item in self.items}
        if len(kinds) > 1:
            raise ValueError("portfolio mixes rate and equity instruments")
        if kinds == {"equity"}:
            underliers = {(i.instrument.spot, i.instrument.sigma, i.instrument.rate) for i in self.items}
            if len(underliers) > 1:
                raise ValueError("equity options in one portfolio must share spot, sigma and rate")
        return self

    @classmethod
    def single(cls, instrument, weight: float = 1.0, label: Optional[str] = None) -> "Portfolio":
        return cls(items=[PortfolioItem(instrument=instrument, weight=weight, label=label)])

    @property
    def kind(self) -> str:
        return instrument_kind(self.items[0].instrument)

    @property
    def horizon(self) -> float:
        return max(item.instrument.maturity for item in self.items)

    @property
    def notional_scale(self) -> float:
        scale = 0.0
        for item in self.items:
            inst = item.instrument
            size = inst.strike if isinstance(inst, EquityOption) else inst.notional
            scale += abs(item.weight) * size
        return max(scale, 1e-12)

    def accruals(self) -> List[float]:
        return sorted({e.accrual for item in self.items for e in item.instrument.events() if e.leg != "fixed"})

    def is_resolved(self) -> bool:
        for item in self.items:
            inst = item.instrument
            if isinstance(inst, Swap) and inst.fixed_rate is None:
                return False
            if isinstance(inst, CapFloor) and inst.strike is None:
                return False
        return True


def cashflow_jump(
    instrument,
    date: float,
    rho: np.ndarray,
    zcb: BondLookup,
    state: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Cash received by B at ``date`` per the instrument, as a function of the state.

    Args:
        instrument: Swap or CapFloor
        date: Reset or pay date
        rho: LIBOR short rate at each state
        zcb: Bond lookup for the (reset, pay) discount factor
        state: Grid state when it differs from rho (log-rate models)

    Raises:
        MissingZcb: if the bond lookup lacks the needed accrual
    """
    rho = np.asarray(rho, dtype=float)
    state = rho if state is None else state
    amount = np.zeros_like(rho)
    for event in instrument.events():
        if abs(event.date - date) > TENOR_EPS:
            continue
        notional = instrument.notional
        if event.leg == "fixed":
            if instrument.fixed_rate is None:
                raise ConfigError("swap fixed rate unresolved; call resolve_atm first")
            amount = amount + instrument.sign * notional * instrument.fixed_rate * event.accrual
        elif event.leg == "float":
            p = zcb.bond(event.reset, event.pay, state)
            amount = amount - instrument.sign * notional * rho * event.accrual * p
        else:
            if instrument.strike is None:
                raise ConfigError("cap strike unresolved; call resolve_atm first")
            p = zcb.bond(event.reset, event.pay, state)
            intrinsic = rho - instrument.strike if instrument.kind == "cap" else instrument.strike - rho
            amount = amount + instrument.sign * notional * np.maximum(intrinsic, 0.0) * event.accrual * p
    return amount


def terminal_payoff(instrument, state: np.ndarray, zcb: Optional[BondLookup] = None, rho=None) -> np.ndarray:
    """Payoff at maturity: the final exchange for rate products, intrinsic value for options."""
    state = np.asarray(state, dtype=float)
    if isinstance(instrument, EquityOption):
        spot = np.exp(state)
        intrinsic = spot - instrument.strike if instrument.kind == "call" else instrument.strike - spot
        return instrument.sign * np.maximum(intrinsic, 0.0)
    rho = state if rho is None else rho
    return cashflow_jump(instrument, instrument.maturity, rho, zcb, state=state)


@dataclass(frozen=True)
class EquityDynamics:
    """Lognormal underlier in the state x = ln S."""

    spot: float
    sigma: float
    rate: float
    kind: str = field(default="equity", init=False)
    log_state: bool = field(default=True, init=False)
    boundary_convexity: float = field(default=1.0, init=False)

    @classmethod
    def for_option(cls, option: EquityOption) -> "EquityDynamics":
        return cls(spot=option.spot, sigma=option.sigma, rate=option.rate)

    @property
    def x0(self) -> float:
        return math.log(self.spot)

    def drift(self, x: np.ndarray, t: float = 0.0) -> np.ndarray:
        return np.full_like(np.asarray(x, dtype=float), self.rate - 0.5 * self.sigma**2)

    def vol(self, x: np.ndarray, t: float = 0.0) -> np.ndarray:
        return np.full_like(np.asarray(x, dtype=float), self.sigma)

    def libor_rate(self, x: np.ndarray) -> np.ndarray:
        return np.full_like(np.asarray(x, dtype=float), self.rate)

    def discount(self, spread: float):
        return lambda x, t: self.libor_rate(x) + spread

    def make_grid(self, horizon: float = 1.0, n_sigmas: float = 6.0, **overrides) -> GridSpec:
        width = n_sigmas * self.sigma * math.sqrt(horizon)
        settings = {"x_min": self.x0 - width, "x_max": self.x0 + width}
        settings.update({k: v for k, v in overrides.items() if v is not None})
        return GridSpec(**settings)


def portfolio_cashflows(
    portfolio: Portfolio, dynamics, zcb: Optional[BondLookup] = None
) -> Tuple[Callable[[np.ndarray], np.ndarray], Dict[float, JumpFunction], float]:
    """Terminal payoff, jump map and horizon for a whole portfolio."""
    horizon = portfolio.horizon
    dated: Dict[float, List[Tuple[float, object]]] = {}
    for item in portfolio.items:
        inst = item.instrument
        for date in sorted({round(e.date, 9) for e in inst.events()}):
            dated.setdefault(date, []).append((item.weight, inst))

    def weighted(entries, date):
        def jump(x: np.ndarray) -> np.ndarray:
            rho = dynamics.libor_rate(x)
            total = np.zeros_like(np.asarray(x, dtype=float))
            for weight, inst in entries:
                total = total + weight * cashflow_jump(inst, date, rho, zcb, state=x)
            return total

        return jump

    jumps = {date: weighted(entries, date) for date, entries in dated.items()}

    def terminal(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        total = np.zeros_like(x)
        for item in portfolio.items:
            if isinstance(item.instrument, EquityOption) and abs(item.instrument.expiry - horizon) <= TENOR_EPS:
                total = total + item.weight * terminal_payoff(item.instrument, x)
        return total

    # equity options expiring before the horizon settle as jumps
    for item in portfolio.items:
        inst = item.instrument
        if isinstance(inst, EquityOption) and inst.expiry < horizon - TENOR_EPS:
            key = round(inst.expiry, 9)
            previous = jumps.get(key)
            payoff = (lambda w, o: lambda x: w * terminal_payoff(o, x))(item.weight, inst)
            jumps[key] = payoff if previous is None else (lambda f, g: lambda x: f(x) + g(x))(previous, payoff)
    return terminal, jumps, horizon


def _value_flows(model: ShortRateModel, flows: Dict[float, JumpFunction], horizon: float, grid: GridSpec, libor_ois: float, name: str) -> float:
    problem = model.leg_problem(flows, horizon, libor_ois, name=name)
    return solve(problem, grid, log_state=model.log_state).value_at(model.x0)


def annuity(model: ShortRateModel, start: float, maturity: float, freq: int, grid: GridSpec, libor_ois: float) -> float:
    """
    Risk-free annuity sum(accrual * P(0, t_pay)) of a fixed-leg schedule.

    Raises:
        DegenerateAnnuity: if the solved annuity is not positive
    """
    flows = {}
    for _, pay, acc in build_schedule(start, maturity, freq):
        flows[pay] = (lambda a: lambda x: np.full_like(np.asarray(x, dtype=float), a))(acc)
    value = _value_flows(model, flows, maturity, grid, libor_ois, name=f"annuity_{maturity:g}")
    if not value > 0:
        raise DegenerateAnnuity(f"annuity for {start:g}-{maturity:g}y is {value}")
    return value


def floating_leg_value(
    model: ShortRateModel,
    start: float,
    maturity: float,
    freq: int,
    grid: GridSpec,
    zcb: ZcbProvider,
    libor_ois: float,
) -> float:
    """Risk-free value of receiving rho * accrual on every period."""
    flows = {}
    for reset, pay, acc in build_schedule(start, maturity, freq):
        flows[reset] = (lambda r, p, a: lambda x: model.libor_rate(x) * a * zcb.bond(r, p, x))(reset, pay, acc)
    return _value_flows(model, flows, maturity, grid, libor_ois, name=f"float_leg_{maturity:g}")


def par_swap_rate(
    model: ShortRateModel,
    tenor: float,
    grid: GridSpec,
    libor_ois: float,
    start: float = 0.0,
    fixed_freq: int = 2,
    float_freq: int = 4,
    zcb: Optional[ZcbProvider] = None,
) -> float:
    """Fixed rate giving zero risk-free NPV: floating-leg PV over the fixed annuity."""
    zcb = zcb or ZcbProvider(model, grid, libor_ois)
    zcb.prepare([1.0 / float_freq])
    maturity = start + tenor
    float_pv = floating_leg_value(model, start, maturity, float_freq, grid, zcb, libor_ois)
    return float_pv / annuity(model, start, maturity, fixed_freq, grid, libor_ois)


def cap_floor_value(model: ShortRateModel, cap: CapFloor, grid: GridSpec, zcb: ZcbProvider, libor_ois: float) -> float:
    """Risk-free premium of a cap or floor."""
    zcb.prepare([1.0 / cap.freq])
    flows = {}
    for event in cap.events():
        flows[event.date] = (lambda d: lambda x: cashflow_jump(cap, d, model.libor_rate(x), zcb, state=x))(event.date)
    return _value_flows(model, flows, cap.maturity, grid, libor_ois, name=f"{cap.kind}_{cap.maturity:g}")


def riskfree_value(portfolio: Portfolio, model: ShortRateModel, grid: GridSpec, libor_ois: float, zcb: Optional[ZcbProvider] = None) -> float:
    """Linear risk-free value of a resolved rate portfolio."""
    zcb = zcb or ZcbProvider(model, grid, libor_ois)
    zcb.prepare(portfolio.accruals())
    terminal, jumps, horizon = portfolio_cashflows(portfolio, model, zcb)
    problem = PDEProblem(
        drift=model.drift,
        vol=model.vol,
        discount_pos=model.discount(-libor_ois),
        terminal=terminal,
        horizon=horizon,
        jumps=jumps,
        boundary_convexity=model.boundary_convexity,
        name="riskfree_portfolio",
    )
    return solve(problem, grid, log_state=model.log_state).value_at(model.x0)


def resolve_atm(
    portfolio: Portfolio, model: ShortRateModel, grid: GridSpec, libor_ois: float, zcb: Optional[ZcbProvider] = None
) -> Portfolio:
    """Replace missing swap rates and cap strikes with par rates of the matching tenor."""
    if portfolio.is_resolved():
        return portfolio
    zcb = zcb or ZcbProvider(model, grid, libor_ois)
    cache: Dict[Tuple[float, float], float] = {}

    def par(start: float, maturity: float, fixed_freq: int = 2, float_freq: int = 4) -> float:
        key = (start, maturity, fixed_freq, float_freq)
        if key not in cache:
            cache[key] = par_swap_rate(model, maturity - start, grid, libor_ois, start, fixed_freq, float_freq, zcb)
            logger.info("atm_rate_resolved", start=start, maturity=maturity, par_bp=cache[key] / 1e-4)
        return cache[key]

    items = []
    for item in portfolio.items:
        inst = item.instrument
        if isinstance(inst, Swap) and inst.fixed_rate is None:
            inst = inst.model_copy(update={"fixed_rate": par(inst.start, inst.maturity, inst.fixed_freq, inst.float_freq)})
        elif isinstance(inst, CapFloor) and inst.strike is None:
            inst = inst.model_copy(update={"strike": par(inst.start, inst.maturity)})
        items.append(item.model_copy(update={"instrument": inst}))
    return Portfolio(items=items)
