"""
Initial-margin models and the rules the PDE engine consumes.

Three ways of producing L_I are supported: an exogenous profile in time,
a delta-approximated VaR with multiplier, and the ISDA SIMM equity
delta/curvature/vega margin reduced to the option's own Greeks.
"""

import math
from pathlib import Path
from typing import Annotated, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import pandas as pd
import structlog
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.stats import norm

from exceptions import ConfigError, DegenerateIM, InvalidRatio

logger = structlog.get_logger(__name__)

QUANTILE_99 = 2.33
SIMM_R_GAMMA = 0.5586
SIMM_R_VEGA = 0.9218


def expected_shortfall_multiple(level: float) -> float:
    """Standard normal expected shortfall at ``level`` in units of sigma."""
    return float(norm.pdf(norm.ppf(level)) / (1.0 - level))


# (margin period of risk in years, quantile multiple)
MPR_PRESETS: Dict[str, Tuple[float, float]] = {
    "bcbs": (14.0 / 365.0, QUANTILE_99),
    "cme": (7.0 / 365.0, QUANTILE_99),
    "lch_member": (7.0 / 365.0, expected_shortfall_multiple(0.995)),
    "lch_client": (9.8 / 365.0, expected_shortfall_multiple(0.995)),
    "ten_day": (10.0 / 365.0, QUANTILE_99),
}

SIMM_RISK_WEIGHTS: Dict[str, float] = {
    "simm_index": 0.15,
    "simm_single_name": 0.25,
}


class ExogenousIM(BaseModel):
    """Piecewise-constant IM profile: amounts[i] applies from times[i] until the next knot."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    type: Literal["exogenous"] = "exogenous"
    times: List[float] = Field(..., min_length=1, description="Knot times (years), increasing")
    amounts: List[float] = Field(..., min_length=1, description="IM amount from each knot on")

    @model_validator(mode="after")
    def _check_knots(self) -> "ExogenousIM":
        if len(self.times) != len(self.amounts):
            raise ValueError("times and amounts must have the same length")
        if any(b <= a for a, b in zip(self.times[:-1], self.times[1:])):
            raise ValueError("profile times must be strictly increasing")
        if any(v < 0 for v in self.amounts):
            raise ValueError("profile amounts must be nonnegative")
        return self

    def profile(self, t: float) -> float:
        idx = int(np.searchsorted(self.times, t, side="right")) - 1
        return float(self.amounts[max(idx, 0)])


class DeltaVaRIM(BaseModel):
    """L_I = |V_x| * alpha_q * eta_side * b * sqrt(delta_mpr)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    type: Literal["delta_var"] = "delta_var"
    alpha_q: float = Field(default=QUANTILE_99, gt=0, description="Normal quantile multiple")
    delta_mpr: float = Field(default=14.0 / 365.0, gt=0, description="Margin period of risk (years)")
    eta_plus: float = Field(default=1.0, description="Multiplier applied where delta > 0")
    eta_minus: float = Field(default=1.0, description="Multiplier applied where delta < 0")
    signed: bool = Field(default=False, description="Allow negative multipliers for incremental pricing")

    @model_validator(mode="after")
    def _check_multipliers(self) -> "DeltaVaRIM":
        if not self.signed and (self.eta_plus < 0 or self.eta_minus < 0):
            raise ValueError("negative multipliers need signed=true")
        return self

    @classmethod
    def from_preset(cls, preset: str, eta_plus: float = 1.0, eta_minus: Optional[float] = None) -> "DeltaVaRIM":
        if preset not in MPR_PRESETS:
            raise ConfigError(f"unknown MPR preset {preset!r}; choose from {sorted(MPR_PRESETS)}")
        mpr, alpha = MPR_PRESETS[preset]
        return cls(
            alpha_q=alpha,
            delta_mpr=mpr,
            eta_plus=eta_plus,
            eta_minus=eta_plus if eta_minus is None else eta_minus,
        )

    def scaled(self, factor: float) -> "DeltaVaRIM":
        return self.model_copy(update={"eta_plus": self.eta_plus * factor, "eta_minus": self.eta_minus * factor})


class SimmEquityIM(BaseModel):
    """SIMM equity delta, curvature and vega margin for a single underlier."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    type: Literal["simm_equity"] = "simm_equity"
    rw_pct: float = Field(default=SIMM_RISK_WEIGHTS["simm_single_name"], gt=0, description="Delta risk weight fraction")
    r_gamma: float = Field(default=SIMM_R_GAMMA, ge=0, description="Curvature coefficient")
    r_vega: float = Field(default=SIMM_R_VEGA, ge=0, description="Vega coefficient")
    eta: float = Field(default=1.0, ge=0, description="Delta margin multiplier")
    allocated_multiplier: float = Field(default=1.0, ge=0, description="Portfolio multiplier on all three margins")
    include_delta: bool = Field(default=True, description="Charge the delta margin")

    @classmethod
    def from_preset(cls, preset: str, **overrides) -> "SimmEquityIM":
        if preset not in SIMM_RISK_WEIGHTS:
            raise ConfigError(f"unknown SIMM preset {preset!r}; choose from {sorted(SIMM_RISK_WEIGHTS)}")
        return cls(rw_pct=SIMM_RISK_WEIGHTS[preset], **overrides)

    def scaled(self, factor: float) -> "SimmEquityIM":
        return self.model_copy(update={"allocated_multiplier": self.allocated_multiplier * factor})


IMSpec = Annotated[Union[ExogenousIM, DeltaVaRIM, SimmEquityIM], Field(discriminator="type")]


class FundingScenario(BaseModel):
    """How a dealer funds posted IM; its blended cost over the risk-free rate is s_l."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = Field(default="scenario")
    sec_fraction: float = Field(default=0.0, ge=0, le=1, description="Fraction funded secured")
    sec_rate: float = Field(default=0.0, ge=0, description="Secured funding spread")
    equity_fraction: float = Field(default=0.0, ge=0, le=1, description="Equity share of the unsecured part")
    roe: float = Field(default=0.0, ge=0, description="Return-on-equity target")
    unsec_rate: float = Field(default=0.0, ge=0, description="Unsecured funding spread")


def delta_im(delta, vol_b, spec: DeltaVaRIM):
    """
    Delta-approximated IM.

    Args:
        delta: Sensitivity to the state
        vol_b: Absolute volatility of the state
        spec: Quantile, MPR and side multipliers

    Returns:
        L_I with eta_plus on positive delta and eta_minus on negative delta
    """
    delta = np.asarray(delta, dtype=float)
    eta = np.where(delta >= 0.0, spec.eta_plus, spec.eta_minus)
    value = np.abs(delta) * spec.alpha_q * eta * np.asarray(vol_b, dtype=float) * math.sqrt(spec.delta_mpr)
    return float(value) if value.ndim == 0 else value


def simm_equity_im(S, delta, gamma, sigma: float, time_to_expiry, spec: SimmEquityIM):
    """Return (L_delta, L_gamma, L_vega) for the option's spot Greeks."""
    S = np.asarray(S, dtype=float)
    m = spec.allocated_multiplier
    gamma_term = np.abs(0.5 * sigma * sigma * S * S * np.asarray(gamma, dtype=float))
    scale = spec.rw_pct / sigma
    l_delta = m * S * np.abs(np.asarray(delta, dtype=float)) * spec.rw_pct * spec.eta
    if not spec.include_delta:
        l_delta = np.zeros_like(l_delta)
    l_gamma = m * gamma_term * scale * spec.r_gamma
    l_vega = m * gamma_term * scale * spec.r_vega * np.maximum(np.asarray(time_to_expiry, dtype=float), 0.0)
    out = (l_delta, l_gamma, l_vega)
    if all(np.ndim(v) == 0 for v in out):
        return tuple(float(v) for v in out)
    return out


def ngr_multiplier(net_replacement: float, gross_replacement: float) -> float:
    """BCBS netting factor 0.4 + 0.6 * NGR; NGR is 1 when gross is zero."""
    if net_replacement < 0 or gross_replacement < 0:
        raise InvalidRatio("replacement costs must be nonnegative")
    if gross_replacement == 0:
        if net_replacement > 0:
            raise InvalidRatio("net replacement cost exceeds zero gross")
        return 1.0
    if net_replacement > gross_replacement:
        raise InvalidRatio(f"net {net_replacement} exceeds gross {gross_replacement}")
    return 0.4 + 0.6 * net_replacement / gross_replacement


def compose_multiplier(stress: float, ngr_factor: float = 1.0) -> float:
    """Total multiplier as stress-period scaling times the netting factor."""
    if stress < 0 or ngr_factor < 0:
        raise ConfigError("multiplier factors must be nonnegative")
    return stress * ngr_factor


def calibrate_multiplier(external_im: float, model_im_at_eta1: float) -> float:
    """eta matching an external IM number; IM is linear in eta."""
    if model_im_at_eta1 == 0:
        raise DegenerateIM("model IM at eta=1 is zero")
    eta = external_im / model_im_at_eta1
    logger.info("multiplier_calibrated", external_im=external_im, model_im=model_im_at_eta1, eta=eta)
    return eta


def funding_spread(scenario: FundingScenario) -> float:
    """Blended IM funding spread s_l."""
    unsecured = scenario.equity_fraction * scenario.roe + (1.0 - scenario.equity_fraction) * scenario.unsec_rate
    return scenario.sec_fraction * scenario.sec_rate + (1.0 - scenario.sec_fraction) * unsecured


def load_profile_csv(path: Union[str, Path]) -> ExogenousIM:
    """Read a two-column (t, L_I) CSV into an exogenous profile."""
    frame = pd.read_csv(path)
    if frame.shape[1] < 2:
        raise ConfigError(f"{path}: expected two columns (t, L_I)")
    frame = frame.iloc[:, :2].dropna().sort_values(frame.columns[0])
    return ExogenousIM(times=frame.iloc[:, 0].astype(float).tolist(), amounts=frame.iloc[:, 1].astype(float).tolist())


class ExogenousRule:
    state_dependent = False

    def __init__(self, spec: ExogenousIM):
        self.spec = spec

    def linearize(self, t, vol, v_x, v_xx):
        zeros = np.zeros_like(v_x)
        return zeros, zeros, np.full_like(v_x, self.spec.profile(t))

    def margin(self, t, vol, v_x, v_xx):
        return np.full_like(np.asarray(v_x, dtype=float), self.spec.profile(t))


class DeltaVaRRule:
    state_dependent = True

    def __init__(self, spec: DeltaVaRIM):
        self.spec = spec
        self._root_mpr = math.sqrt(spec.delta_mpr)

    def linearize(self, t, vol, v_x, v_xx):
        s = np.sign(v_x)
        eta = np.where(v_x > 0.0, self.spec.eta_plus, self.spec.eta_minus)
        k1 = self.spec.alpha_q * eta * vol * self._root_mpr * s
        zeros = np.zeros_like(v_x)
        return k1, zeros, zeros

    def margin(self, t, vol, v_x, v_xx):
        return delta_im(v_x, vol, self.spec)


class SimmEquityRule:
    """SIMM margin in the log-spot state, where S V_S = V_x and S^2 V_SS = V_xx - V_x."""

    state_dependent = True

    def __init__(self, spec: SimmEquityIM, expiry: float):
        self.spec = spec
        self.expiry = expiry

    def _pieces(self, t, vol):
        spec = self.spec
        tau = max(self.expiry - t, 0.0)
        curvature = spec.rw_pct / vol * (spec.r_gamma + spec.r_vega * tau)
        delta_weight = spec.rw_pct * spec.eta if spec.include_delta else 0.0
        return spec.allocated_multiplier, delta_weight, curvature, 0.5 * vol * vol

    def linearize(self, t, vol, v_x, v_xx):
        m, delta_weight, curvature, half_var = self._pieces(t, vol)
        g = np.sign(v_xx - v_x)
        k2 = m * curvature * g * half_var
        k1 = m * delta_weight * np.sign(v_x) - k2
        return k1, k2, np.zeros_like(v_x)

    def margin(self, t, vol, v_x, v_xx):
        m, delta_weight, curvature, half_var = self._pieces(t, vol)
        return m * (delta_weight * np.abs(v_x) + curvature * half_var * np.abs(v_xx - v_x))


def im_rule(spec, expiry: Optional[float] = None):
    """Adapt an IM spec into the rule object the PDE engine calls."""
    if isinstance(spec, ExogenousIM):
        return ExogenousRule(spec)
    if isinstance(spec, DeltaVaRIM):
        return DeltaVaRRule(spec)
    if isinstance(spec, SimmEquityIM):
        if expiry is None:
            raise ConfigError("SIMM equity margin needs the option expiry")
        return SimmEquityRule(spec, expiry)
    raise ConfigError(f"unsupported IM spec {type(spec).__name__}")


def scale_im(spec, factor: float):
    """Same spec with every multiplier scaled by ``factor``."""
    if isinstance(spec, ExogenousIM):
        return spec.model_copy(update={"amounts": [a * factor for a in spec.amounts]})
    return spec.scaled(factor)
