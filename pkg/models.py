"""
Run configuration schema.

A run is described by one YAML document. Every section is a pydantic model
with unknown keys rejected, so a typo fails validation before any solve.
"""

from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from exceptions import ConfigError
from im import IMSpec, FundingScenario, SIMM_RISK_WEIGHTS, MPR_PRESETS
from instruments import EquityOption, Portfolio, PortfolioItem
from mc_engine import McConfig
from ratemodels import BkParams, CalibrationTargets, MnlParams
from xva import CollateralMode, CurveSet, Side


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(StrictModel):
    """Rate model: calibration targets, explicit parameters, or both."""

    kind: Literal["mnl", "bk"] = Field(..., description="Mixed normal-lognormal or Black-Karasinski")
    targets: Optional[CalibrationTargets] = Field(default=None, description="Quotes to calibrate to")
    params: Optional[Union[MnlParams, BkParams]] = Field(default=None, description="Explicit parameters")
    bk_mean_rule: Literal["median", "mean"] = Field(default="median", description="How BK pins mu to 4.4%")
    bounds: Optional[Tuple[float, float]] = Field(default=None, description="State grid bounds override")

    @model_validator(mode="after")
    def _check_source(self) -> "ModelSection":
        if self.targets is None and self.params is None:
            raise ValueError("model needs targets or params")
        if self.params is not None:
            expected = MnlParams if self.kind == "mnl" else BkParams
            if not isinstance(self.params, expected):
                raise ValueError(f"params do not match model kind {self.kind!r}")
        return self


class GridOverrides(StrictModel):
    """Grid fields left unset fall back to the model's defaults."""

    x_min: Optional[float] = None
    x_max: Optional[float] = None
    n_space: Optional[int] = Field(default=None, ge=5)
    n_time_per_year: Optional[int] = Field(default=None, ge=1)
    picard_tol: Optional[float] = Field(default=None, gt=0)
    picard_max: Optional[int] = Field(default=None, ge=1)
    picard_relax_after: Optional[int] = Field(default=None, ge=1)
    picard_relaxation: Optional[float] = Field(default=None, gt=0, le=1)
    freeze_stalled_switches: Optional[bool] = None
    rannacher_steps: Optional[int] = Field(default=None, ge=0)

    def as_overrides(self) -> dict:
        return self.model_dump(exclude_none=True)


class EngineSection(StrictModel):
    grid: GridOverrides = Field(default_factory=GridOverrides)
    mc: McConfig = Field(default_factory=McConfig)


class XvaOptions(StrictModel):
    mode: CollateralMode = Field(default=CollateralMode.UNCOLLATERALIZED)
    side: Side = Field(default=Side.BID)
    netting: bool = Field(default=False, description="Standalone, Sum, Portf and Difference rows")
    rates: bool = Field(default=False, description="Add IM-adjusted bid, par and ask fixed rates of a single-swap book")

    @model_validator(mode="after")
    def _check_rates(self) -> "XvaOptions":
        if self.rates and self.netting:
            raise ValueError("rates and netting rows cannot be combined")
        return self


class SimmOptions(StrictModel):
    """Equity MVA table across IM funding scenarios."""

    scenarios: List[FundingScenario] = Field(..., min_length=1)
    risk_weight: str = Field(default="simm_single_name", description="Risk weight preset")
    allocated_multiplier: float = Field(default=0.234, ge=0, description="Incremental-IM multiplier column")
    long_expiry: float = Field(default=2.0, gt=0, description="Expiry of the long-dated column (years)")

    @model_validator(mode="after")
    def _check_preset(self) -> "SimmOptions":
        if self.risk_weight not in SIMM_RISK_WEIGHTS:
            raise ValueError(f"unknown risk weight preset {self.risk_weight!r}")
        return self


class BasisOptions(StrictModel):
    """Inter-CCP basis sweep over the allocated multiplier."""

    tenor: float = Field(default=10.0, gt=0, description="Swap tenor (years)")
    eta_values: List[float] = Field(..., min_length=1, description="Allocated multipliers to sweep")
    funding: FundingScenario = Field(..., description="IM funding of both CCP legs")
    mpr_preset: str = Field(default="ten_day", description="MPR and quantile preset")

    @model_validator(mode="after")
    def _check_sweep(self) -> "BasisOptions":
        if any(eta < 0 for eta in self.eta_values):
            raise ValueError("eta_values must be nonnegative")
        if self.mpr_preset not in MPR_PRESETS:
            raise ValueError(f"unknown MPR preset {self.mpr_preset!r}")
        return self


class RunConfig(StrictModel):
    """Everything a command needs; sections a command does not read may be omitted."""

    model: Optional[ModelSection] = None
    curves: List[CurveSet] = Field(default_factory=lambda: [CurveSet()])
    instruments: List[PortfolioItem] = Field(default_factory=list)
    im: Optional[IMSpec] = None
    engine: EngineSection = Field(default_factory=EngineSection)
    xva: XvaOptions = Field(default_factory=XvaOptions)
    simm: Optional[SimmOptions] = None
    basis: Optional[BasisOptions] = None

    @model_validator(mode="after")
    def _check_portfolio(self) -> "RunConfig":
        if self.instruments:
            Portfolio(items=self.instruments)
        return self

    def portfolio(self) -> Portfolio:
        if not self.instruments:
            raise ConfigError("config has no instruments")
        return Portfolio(items=self.instruments)

    @property
    def is_equity(self) -> bool:
        return bool(self.instruments) and isinstance(self.instruments[0].instrument, EquityOption)


def parse_run_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data or {})
    except ValidationError as e:
        raise ConfigError(f"invalid run config: {e}") from e


def load_run_config(path: Union[str, Path]) -> RunConfig:
    """Read and validate a YAML run config."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML: {e}") from e
    return parse_run_config(data)


def dump_run_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.model_dump(mode="json", exclude_none=True), sort_keys=False)
