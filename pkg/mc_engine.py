"""
Monte-Carlo regression cross-check of the finite-difference XVA numbers.

Paths of the rate state are simulated forward with Euler steps; values are
rolled back along the paths. At every step a polynomial regression of the
rolled-back value on the state stands in for V(t, x): its sign picks the
liability-side discount rate and shocking it by the 99% state move in both
directions gives the IM as the worse loss.
"""

import math
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import structlog
from pydantic import BaseModel, ConfigDict, Field

from exceptions import ConfigError, RegressionSingular
from im import DeltaVaRIM, ExogenousIM
from instruments import Portfolio, portfolio_cashflows
from pde_engine import merge_time_grid
from ratemodels import ShortRateModel
from xva import (
    BP,
    CollateralMode,
    CurveSet,
    PricingContext,
    Side,
    XVAReport,
    decompose,
    ladder_curves,
    make_context,
    price_all_in,
    report_annuity,
)

logger = structlog.get_logger(__name__)


class McConfig(BaseModel):
    """Simulation and regression controls."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    n_paths: int = Field(default=100_000, ge=2, description="Number of paths")
    steps_per_year: int = Field(default=52, ge=1, description="Euler steps per year")
    seed: int = Field(default=20160301, ge=0, description="Root seed")
    basis_degree: int = Field(default=4, ge=2, le=6, description="Polynomial regression degree")
    antithetic: bool = Field(default=True, description="Pair every normal draw with its negative")
    block_size: int = Field(default=25_000, ge=2, description="Paths per independent substream")
    control_variate: bool = Field(default=True, description="Use the FD risk-free value as control")


@dataclass(frozen=True)
class PathSet:
    times: np.ndarray
    states: np.ndarray  # (len(times), n_paths)
    pair_ids: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.states.shape[1]


def _simulate_block(model: ShortRateModel, times: np.ndarray, size: int, seed_seq: np.random.SeedSequence, antithetic: bool):
    rng = np.random.Generator(np.random.Philox(seed_seq))
    steps = len(times) - 1
    if antithetic:
        half = (size + 1) // 2
        draws = rng.standard_normal((steps, half))
        normals = np.concatenate([draws, -draws], axis=1)[:, :size]
        pairs = np.concatenate([np.arange(half), np.arange(half)])[:size]
    else:
        normals = rng.standard_normal((steps, size))
        pairs = np.arange(size)
    states = np.empty((steps + 1, size))
    states[0] = model.x0
    for k in range(steps):
        dt = times[k + 1] - times[k]
        drift, vol = model.coefficients(states[k])
        states[k + 1] = states[k] + drift * dt + vol * math.sqrt(dt) * normals[k]
    return states, pairs


def simulate_paths(
    model: ShortRateModel,
    horizon: float,
    cfg: McConfig,
    event_dates: Sequence[float] = (),
    executor: Optional[Executor] = None,
) -> PathSet:
    """
    Euler-Maruyama paths of the model state under the pricing measure.

    Blocks of paths draw from independent Philox substreams spawned from the
    seed, so the result depends only on the config, not on thread scheduling.
    """
    times = merge_time_grid(horizon, cfg.steps_per_year, event_dates)
    sizes = [cfg.block_size] * (cfg.n_paths // cfg.block_size)
    if cfg.n_paths % cfg.block_size:
        sizes.append(cfg.n_paths % cfg.block_size)
    children = np.random.SeedSequence(cfg.seed).spawn(len(sizes))

    def run(i: int):
        return _simulate_block(model, times, sizes[i], children[i], cfg.antithetic)

    if executor is None:
        with ThreadPoolExecutor(max_workers=min(len(sizes), 8)) as pool:
            blocks = list(pool.map(run, range(len(sizes))))
    else:
        blocks = list(executor.map(run, range(len(sizes))))

    offset = 0
    pair_ids = []
    for states, pairs in blocks:
        pair_ids.append(pairs + offset)
        offset += int(pairs.max()) + 1
    return PathSet(
        times=times,
        states=np.concatenate([b[0] for b in blocks], axis=1),
        pair_ids=np.concatenate(pair_ids),
    )


@dataclass(frozen=True)
class PolynomialFit:
    """Least-squares polynomial in the standardized state."""

    center: float
    scale: float
    coef: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.polynomial.polynomial.polyval((x - self.center) / self.scale, self.coef)


def regress(x: np.ndarray, y: np.ndarray, degree: int) -> Optional[PolynomialFit]:
    """Fit y on a polynomial basis of x; None when x carries no spread."""
    center, scale = float(np.mean(x)), float(np.std(x))
    if scale <= 1e-12 * max(1.0, abs(center)):
        return None
    design = np.polynomial.polynomial.polyvander((x - center) / scale, degree)
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < degree + 1:
        raise RegressionSingular(f"design matrix rank {rank} below {degree + 1}")
    return PolynomialFit(center, scale, coef)


def _pathwise_value(
    paths: PathSet,
    terminal: Callable,
    jumps_by_step: Dict[int, Callable],
    discount_pos: Callable,
    discount_neg: Optional[Callable],
    model: ShortRateModel,
    im_spec,
    im_cost: float,
    degree: int,
) -> np.ndarray:
    """Roll values back along the paths; returns the t=0 value per path."""
    times, states = paths.times, paths.states
    last = len(times) - 1
    z = terminal(states[last])
    if last in jumps_by_step:
        z = z + jumps_by_step[last](states[last])

    needs_fit = discount_neg is not None or isinstance(im_spec, DeltaVaRIM)
    fit: Optional[PolynomialFit] = None
    for k in range(last, 0, -1):
        dt = times[k] - times[k - 1]
        x = states[k - 1]
        t_lo = times[k - 1]
        if needs_fit:
            # the t=0 slice has one state value, so the latest fit is reused there
            fit = regress(x, z, degree) or fit
        rate = discount_pos(x, t_lo)
        if discount_neg is not None and fit is not None:
            rate = np.where(fit(x) >= 0.0, rate, discount_neg(x, t_lo))
        y = z * np.exp(-rate * dt)

        if im_cost != 0.0 and im_spec is not None:
            if isinstance(im_spec, ExogenousIM):
                margin = im_spec.profile(t_lo)
            elif fit is not None:
                root = math.sqrt(im_spec.delta_mpr) * im_spec.alpha_q * model.vol(x)
                centre = fit(x)
                down = centre - fit(x - im_spec.eta_plus * root)
                up = centre - fit(x + im_spec.eta_minus * root)
                margin = np.maximum(np.maximum(down, up), 0.0)
            else:
                margin = 0.0
            y = y - im_cost * margin * dt

        z = y
        if (k - 1) in jumps_by_step:
            z = z + jumps_by_step[k - 1](x)
    return z


def _stderr(values: np.ndarray, pair_ids: np.ndarray) -> float:
    counts = np.bincount(pair_ids)
    means = np.bincount(pair_ids, weights=values)[counts > 0] / counts[counts > 0]
    return float(np.std(means, ddof=1) / math.sqrt(len(means))) if len(means) > 1 else 0.0


def mc_xva(
    portfolio: Portfolio,
    model: ShortRateModel,
    curves: CurveSet,
    im_spec,
    cfg: McConfig,
    mode: CollateralMode = CollateralMode.UNCOLLATERALIZED,
    side: Side = Side.BID,
    ctx: Optional[PricingContext] = None,
    label: Optional[str] = None,
    paths: Optional[PathSet] = None,
    rollbacks: Optional[Dict[tuple, np.ndarray]] = None,
) -> XVAReport:
    """
    Regression/simulation XVA on common random numbers across the solve ladder.

    ``paths`` lets several curve sets share one simulation of the same
    portfolio; they must cover the portfolio's cashflow dates. ``rollbacks``
    memoizes pathwise values by discounting and IM cost, so rungs that
    repeat across curve sets sharing ``paths``, IM spec and side are rolled
    back once.

    Raises:
        RegressionSingular: if a regression design matrix is rank deficient
    """
    if portfolio.kind != "rate":
        raise ConfigError("the Monte-Carlo engine covers rate portfolios only")
    if im_spec is not None and not isinstance(im_spec, (DeltaVaRIM, ExogenousIM)):
        raise ConfigError("Monte-Carlo IM supports delta-VaR and exogenous profiles")
    ctx = ctx or make_context(portfolio, model, curves.libor_ois)
    terminal, jumps, horizon = portfolio_cashflows(portfolio, model, ctx.zcb)
    if paths is None:
        paths = simulate_paths(model, horizon, cfg, list(jumps), ctx.executor)

    jumps_by_step: Dict[int, Callable] = {}
    for date, fn in jumps.items():
        k = int(np.argmin(np.abs(paths.times - date)))
        jumps_by_step[k] = fn

    libor_ois = curves.libor_ois * BP
    bid = Side(side) is Side.BID

    rollbacks = {} if rollbacks is None else rollbacks

    def leg(shifted: CurveSet, vm: bool) -> np.ndarray:
        key = (vm, bid, shifted.spread_b, shifted.spread_c, shifted.im_spread, libor_ois)
        if key in rollbacks:
            return rollbacks[key]
        if vm:
            pos, neg = model.discount(-libor_ois), None
        else:
            r_c, r_b = model.discount(shifted.spread_c), model.discount(shifted.spread_b)
            pos, neg = (r_c, r_b) if bid else (r_b, r_c)
            if shifted.spread_b == shifted.spread_c:
                neg = None
        cost = (shifted.im_spread if bid else -shifted.im_spread) if im_spec is not None else 0.0
        rollbacks[key] = _pathwise_value(paths, terminal, jumps_by_step, pos, neg, model, im_spec, cost, cfg.basis_degree)
        return rollbacks[key]

    vm = CollateralMode(mode) is CollateralMode.FULL_VM
    pathwise = {name: leg(c, vm) for name, c in ladder_curves(curves, mode).items()}
    riskfree_paths = leg(curves.only(), True)

    if cfg.control_variate:
        riskfree_fd = price_all_in(portfolio, model, curves.only(), None, CollateralMode.FULL_VM, Side.BID, ctx).value_at(model.x0)
        values = {name: float(np.mean(z - riskfree_paths)) + riskfree_fd for name, z in pathwise.items()}
        values["riskfree"] = riskfree_fd
    else:
        values = {name: float(np.mean(z)) for name, z in pathwise.items()}
        values["riskfree"] = float(np.mean(riskfree_paths))
    for name in ("cva", "dva", "cfa", "dfa"):
        values.setdefault(name, values["base"])
        pathwise.setdefault(name, pathwise["base"])

    annuity_value, units = report_annuity(portfolio, ctx, curves)
    report = XVAReport.from_ladder(label or curves.name, values, annuity_value, units)
    full = pathwise["full"] - riskfree_paths if cfg.control_variate else pathwise["full"]
    stderr = {
        "npv": _stderr(full, paths.pair_ids),
        "mva": _stderr(pathwise["noim"] - pathwise["full"], paths.pair_ids),
        "cva": _stderr(pathwise["base"] - pathwise["cva"], paths.pair_ids),
    }
    logger.info("mc_xva_finished", label=report.label, paths=paths.n_paths, npv=report.yv(report.npv), mva=report.yv(report.mva))
    return replace(report, stderr=stderr)


def mc_check(
    portfolio: Portfolio,
    model: ShortRateModel,
    ladder: Sequence[CurveSet],
    im_spec,
    cfg: McConfig,
    mode: CollateralMode = CollateralMode.UNCOLLATERALIZED,
    ctx: Optional[PricingContext] = None,
) -> pd.DataFrame:
    """FD against MC NPV and MVA in yield value, one row per curve set, on one shared path set."""
    ctx = ctx or make_context(portfolio, model, ladder[0].libor_ois)
    _, jumps, horizon = portfolio_cashflows(portfolio, model, ctx.zcb)
    paths = simulate_paths(model, horizon, cfg, list(jumps), ctx.executor)
    rollbacks: Dict[tuple, np.ndarray] = {}
    rows: List[Dict[str, float]] = []
    for curves in ladder:
        fd = decompose(portfolio, model, curves, im_spec, mode, Side.BID, ctx)
        mc = mc_xva(portfolio, model, curves, im_spec, cfg, mode, Side.BID, ctx, paths=paths, rollbacks=rollbacks)
        rows.append(
            {
                "label": curves.name,
                "fd_npv": fd.yv(fd.npv),
                "mc_npv": mc.yv(mc.npv),
                "npv_diff": mc.yv(mc.npv) - fd.yv(fd.npv),
                "fd_mva": fd.yv(fd.mva),
                "mc_mva": mc.yv(mc.mva),
                "mva_diff": mc.yv(mc.mva) - fd.yv(fd.mva),
                "mc_npv_stderr": mc.yv(mc.stderr["npv"]),
                "mc_mva_stderr": mc.yv(mc.stderr["mva"]),
            }
        )
    return pd.DataFrame(rows)
