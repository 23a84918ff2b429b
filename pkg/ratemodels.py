"""
One-factor short-rate dynamics and their calibration.

Two models drive the LIBOR short rate rho:

- mixed normal-lognormal (MNL): state x = rho, d rho = a(theta - rho)dt + sigma(rho) dW
- Black-Karasinski (BK): state x = ln rho, dx = kappa(mu - x)dt + sigma dW

The risk-free rate is r = rho - LIBOR-OIS spread.
"""

import math
from abc import ABC, abstractmethod
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Literal, Optional, Tuple, Union

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import root

from exceptions import ConfigError, MissingZcb, NoConvergence
from pde_engine import Coefficient, GridSpec, JumpFunction, PDEProblem, ValueSurface, solve

logger = structlog.get_logger(__name__)

LONG_TERM_RATE = 0.044
MNL_LOWER_KNEE = 0.015
MNL_UPPER_KNEE = 0.06
BP = 1e-4


class MnlParams(BaseModel):
    """Mixed normal-lognormal parameters."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    a: float = Field(..., gt=0, description="Mean-reversion speed (1/year)")
    theta: float = Field(default=LONG_TERM_RATE, gt=0, description="Long-term mean level")
    sigma2: float = Field(..., gt=0, description="Plateau volatility (absolute, per sqrt year)")
    r0: float = Field(..., gt=0, description="Initial LIBOR short rate")


class BkParams(BaseModel):
    """Black-Karasinski parameters in the log-rate state."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kappa: float = Field(..., gt=0, description="Mean-reversion speed (1/year)")
    mu: float = Field(..., description="Log-rate mean level")
    sigma: float = Field(..., gt=0, description="Log-volatility (per sqrt year)")
    x0: float = Field(..., description="Initial log-rate")


class CalibrationTargets(BaseModel):
    """Market quotes the three free parameters are fitted to."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    libor3m: float = Field(..., gt=0, description="3-month LIBOR rate (decimal)")
    par10y: float = Field(..., gt=0, description="10-year ATM par swap rate (decimal)")
    cap10y_yv: float = Field(..., gt=0, description="10-year ATM cap premium as yield value (bp)")
    libor_ois: float = Field(default=13.0, gt=0, description="LIBOR-OIS spread (bp)")


def mnl_coefficients(r: Union[float, np.ndarray], params: MnlParams):
    """Drift a(theta - r) and piecewise volatility, clamped at zero below r = 0."""
    r = np.asarray(r, dtype=float)
    drift = params.a * (params.theta - r)
    vol = np.where(
        r < MNL_LOWER_KNEE,
        r / MNL_LOWER_KNEE * params.sigma2,
        np.where(r < MNL_UPPER_KNEE, params.sigma2, r / MNL_UPPER_KNEE * params.sigma2),
    )
    vol = np.maximum(vol, 0.0)
    if drift.ndim == 0:
        return float(drift), float(vol)
    return drift, vol


def bk_coefficients(x: Union[float, np.ndarray], params: BkParams):
    """Drift kappa(mu - x) and constant log-volatility."""
    x = np.asarray(x, dtype=float)
    drift = params.kappa * (params.mu - x)
    vol = np.full_like(x, params.sigma)
    if drift.ndim == 0:
        return float(drift), float(vol)
    return drift, vol


def bk_mean_level(kappa: float, sigma: float, rule: Literal["median", "mean"] = "median") -> float:
    """mu placing the stationary median (or mean) of exp(x) at the long-term rate."""
    if rule == "median":
        return math.log(LONG_TERM_RATE)
    return math.log(LONG_TERM_RATE) - sigma * sigma / (4.0 * kappa)


class ShortRateModel(ABC):
    """Common surface the engine needs from a rate model."""

    kind: str
    log_state: bool
    boundary_convexity: float
    default_bounds: Tuple[float, float]

    @abstractmethod
    def coefficients(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]: ...

    @abstractmethod
    def libor_rate(self, x: np.ndarray) -> np.ndarray: ...

    @property
    @abstractmethod
    def x0(self) -> float: ...

    def drift(self, x: np.ndarray, t: float = 0.0) -> np.ndarray:
        return self.coefficients(x)[0]

    def vol(self, x: np.ndarray, t: float = 0.0) -> np.ndarray:
        return self.coefficients(x)[1]

    def discount(self, spread: float) -> Coefficient:
        """Rate curve rho(x) + spread as a solver coefficient."""
        return lambda x, t: self.libor_rate(x) + spread

    def make_grid(self, **overrides) -> GridSpec:
        lo, hi = self.default_bounds
        settings = {"x_min": lo, "x_max": hi}
        settings.update({k: v for k, v in overrides.items() if v is not None})
        return GridSpec(**settings)

    def leg_problem(
        self,
        flows: Dict[float, JumpFunction],
        horizon: float,
        libor_ois: float,
        name: str = "leg",
    ) -> PDEProblem:
        """Linear risk-free problem paying ``flows`` (date -> amount on the grid)."""
        terminal = flows.get(horizon)
        jumps = {d: f for d, f in flows.items() if abs(d - horizon) > 1e-9}
        return PDEProblem(
            drift=self.drift,
            vol=self.vol,
            discount_pos=self.discount(-libor_ois),
            terminal=terminal if terminal is not None else (lambda x: np.zeros_like(x)),
            horizon=horizon,
            jumps=jumps,
            boundary_convexity=self.boundary_convexity,
            name=name,
        )


@dataclass(frozen=True)
class MnlModel(ShortRateModel):
    params: MnlParams
    default_bounds: Tuple[float, float] = (-0.01, 0.20)
    kind: str = field(default="mnl", init=False)
    log_state: bool = field(default=False, init=False)
    boundary_convexity: float = field(default=0.0, init=False)

    def coefficients(self, x):
        return mnl_coefficients(x, self.params)

    def libor_rate(self, x):
        return np.asarray(x, dtype=float)

    @property
    def x0(self) -> float:
        return self.params.r0


@dataclass(frozen=True)
class BkModel(ShortRateModel):
    params: BkParams
    default_bounds: Tuple[float, float] = (math.log(1e-4), math.log(0.5))
    kind: str = field(default="bk", init=False)
    log_state: bool = field(default=True, init=False)
    boundary_convexity: float = field(default=1.0, init=False)

    def coefficients(self, x):
        return bk_coefficients(x, self.params)

    def libor_rate(self, x):
        return np.exp(np.asarray(x, dtype=float))

    @property
    def x0(self) -> float:
        return self.params.x0


def build_model(params: Union[MnlParams, BkParams], bounds: Optional[Tuple[float, float]] = None) -> ShortRateModel:
    cls = MnlModel if isinstance(params, MnlParams) else BkModel
    return cls(params, bounds) if bounds is not None else cls(params)


def zcb_price(model: ShortRateModel, t: float, T: float, grid: GridSpec, libor_ois: float) -> ValueSurface:
    """
    Bond P(t, T) over the rate state, discounting at r = rho - libor_ois.

    Args:
        model: Rate model
        t: Valuation time
        T: Bond maturity
        grid: State grid
        libor_ois: Spread between LIBOR and the risk-free rate (decimal)

    Returns:
        ValueSurface of bond prices at time t
    """
    if t > T:
        raise ConfigError(f"zcb_price needs t <= T, got t={t}, T={T}")
    x = grid.nodes
    if T - t <= 1e-12:
        ones = np.ones_like(x)
        zeros = np.zeros_like(x)
        return ValueSurface(x=x, values=ones, delta=zeros, gamma=zeros, log_state=model.log_state)
    problem = model.leg_problem({T - t: lambda s: np.ones_like(s)}, T - t, libor_ois, name=f"zcb_{T - t:g}")
    return solve(problem, grid, log_state=model.log_state)


def _accrual_key(accrual: float) -> float:
    return round(float(accrual), 9)


class ZcbProvider:
    """
    Prepared bond surfaces P(t, t + d; x) keyed by accrual length d.

    The models are time-homogeneous so one solve per accrual serves every
    reset date. Surfaces are read by interpolation so path states work too.
    """

    def __init__(self, model: ShortRateModel, grid: GridSpec, libor_ois: float):
        self.model = model
        self.grid = grid
        self.libor_ois = libor_ois
        self.x = grid.nodes
        self._surfaces: Dict[float, np.ndarray] = {}

    def prepare(self, accruals: Iterable[float]) -> "ZcbProvider":
        for accrual in sorted({_accrual_key(a) for a in accruals}):
            if accrual not in self._surfaces:
                self._surfaces[accrual] = zcb_price(self.model, 0.0, accrual, self.grid, self.libor_ois).values
        return self

    @property
    def accruals(self) -> List[float]:
        return sorted(self._surfaces)

    def surface(self, reset: float, pay: float) -> np.ndarray:
        key = _accrual_key(pay - reset)
        if key not in self._surfaces:
            raise MissingZcb(reset, pay)
        return self._surfaces[key]

    def bond(self, reset: float, pay: float, state: np.ndarray) -> np.ndarray:
        return np.interp(state, self.x, self.surface(reset, pay))


def libor_term_rate(model: ShortRateModel, tenor: float, grid: GridSpec) -> float:
    """Simple-compounded LIBOR over ``tenor`` implied by discounting at rho."""
    p = zcb_price(model, 0.0, tenor, grid, libor_ois=0.0).value_at(model.x0)
    return (1.0 / p - 1.0) / tenor


@dataclass(frozen=True)
class CalibrationResult:
    params: Union[MnlParams, BkParams]
    residuals_bp: Dict[str, float]
    evaluations: int
    model: ShortRateModel

    @property
    def max_residual_bp(self) -> float:
        return max(abs(v) for v in self.residuals_bp.values())


def _params_from_vector(
    kind: str, z: np.ndarray, bk_mean_rule: str
) -> Union[MnlParams, BkParams]:
    if kind == "mnl":
        return MnlParams(r0=math.exp(z[0]), a=math.exp(z[1]), sigma2=math.exp(z[2]))
    kappa, sigma = math.exp(z[1]), math.exp(z[2])
    return BkParams(x0=float(z[0]), kappa=kappa, sigma=sigma, mu=bk_mean_level(kappa, sigma, bk_mean_rule))


def _initial_vector(kind: str, targets: CalibrationTargets) -> np.ndarray:
    if kind == "mnl":
        return np.array([math.log(targets.libor3m), math.log(0.05), math.log(0.0105)])
    return np.array([math.log(targets.libor3m), math.log(0.05), math.log(0.4)])


def target_residuals(
    model: ShortRateModel,
    targets: CalibrationTargets,
    grid: GridSpec,
    executor: Optional[Executor] = None,
) -> Dict[str, float]:
    """Model minus market for the three calibration quotes, all in bp."""
    import instruments

    libor_ois = targets.libor_ois * BP
    zcb = ZcbProvider(model, grid, libor_ois).prepare([0.25])
    own_pool = executor is None
    pool = executor or ThreadPoolExecutor(max_workers=3)
    try:
        libor_future = pool.submit(libor_term_rate, model, 0.25, grid)
        float_future = pool.submit(instruments.floating_leg_value, model, 0.0, 10.0, 4, grid, zcb, libor_ois)
        annuity_future = pool.submit(instruments.annuity, model, 0.0, 10.0, 2, grid, libor_ois)
        libor3m = libor_future.result()
        annuity_value = annuity_future.result()
        par = float_future.result() / annuity_value
    finally:
        if own_pool:
            pool.shutdown(wait=True)

    cap = instruments.CapFloor(strike=par, kind="cap", position="long", start=0.0, maturity=10.0, freq=4)
    premium = instruments.cap_floor_value(model, cap, grid, zcb, libor_ois)
    return {
        "libor3m": (libor3m - targets.libor3m) / BP,
        "par10y": (par - targets.par10y) / BP,
        "cap10y_yv": premium / annuity_value / BP - targets.cap10y_yv,
    }


def calibrate(
    model_kind: Literal["mnl", "bk"],
    targets: CalibrationTargets,
    grid_overrides: Optional[dict] = None,
    bk_mean_rule: Literal["median", "mean"] = "median",
    tolerance_bp: float = 0.01,
    max_iterations: int = 100,
    executor: Optional[Executor] = None,
) -> CalibrationResult:
    """
    Fit (r0, a, sigma2) for MNL or (x0, kappa, sigma) for BK to the targets.

    The long-term level is held at 4.4%. Parameters are searched in log space
    with MINPACK's hybrid method, each evaluation repricing through the FD engine.

    Raises:
        NoConvergence: if residuals stay above ``tolerance_bp``
    """
    if model_kind not in ("mnl", "bk"):
        raise ConfigError(f"unknown model kind {model_kind!r}")
    overrides = grid_overrides or {}
    evaluations = 0
    last: Dict[str, float] = {}

    def objective(z: np.ndarray) -> np.ndarray:
        nonlocal evaluations, last
        evaluations += 1
        model = build_model(_params_from_vector(model_kind, z, bk_mean_rule))
        grid = model.make_grid(**overrides)
        last = target_residuals(model, targets, grid, executor)
        logger.debug("calibration_step", evaluation=evaluations, residuals_bp=last)
        return np.array(list(last.values()))

    z0 = _initial_vector(model_kind, targets)
    solution = root(objective, z0, method="hybr", options={"xtol": 1e-10, "maxfev": max_iterations})
    params = _params_from_vector(model_kind, solution.x, bk_mean_rule)
    model = build_model(params)
    residuals = target_residuals(model, targets, model.make_grid(**overrides), executor)
    worst = max(abs(v) for v in residuals.values())
    if not np.all(np.isfinite(list(residuals.values()))) or worst > tolerance_bp:
        logger.error("calibration_failed", message=solution.message, residuals_bp=residuals)
        raise NoConvergence(
            f"calibration residual {worst:.4g} bp above {tolerance_bp} bp: {solution.message}",
            step=evaluations,
            residual=worst,
            residuals=list(residuals.values()),
        )
    logger.info("calibration_converged", kind=model_kind, evaluations=evaluations, residuals_bp=residuals)
    return CalibrationResult(params=params, residuals_bp=residuals, evaluations=evaluations, model=model)
