"""
Pytest configuration and shared fixtures for the XVA engine tests.
"""

import os
import sys
from dataclasses import dataclass

import numpy as np
import pytest

# Add the parent directory to the Python path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from instruments import EquityDynamics, EquityOption, Portfolio, Swap  # noqa: E402
from pde_engine import GridSpec  # noqa: E402
from ratemodels import MnlModel, MnlParams  # noqa: E402
from settings import Settings  # noqa: E402


@dataclass(frozen=True)
class FrozenRateModel(MnlModel):
    """MNL model with the rate pinned: zero drift and zero volatility."""

    def coefficients(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros_like(x), np.zeros_like(x)


@dataclass(frozen=True)
class DeterministicRateModel(MnlModel):
    """MNL drift with volatility switched off."""

    def coefficients(self, x):
        x = np.asarray(x, dtype=float)
        return self.params.a * (self.params.theta - x), np.zeros_like(x)


@pytest.fixture
def mnl_params():
    return MnlParams(a=0.08, sigma2=0.0105, r0=0.02)


@pytest.fixture
def mnl_model(mnl_params):
    return MnlModel(mnl_params)


@pytest.fixture
def coarse_rate_grid(mnl_model):
    return mnl_model.make_grid(n_space=151, n_time_per_year=24)


@pytest.fixture
def frozen_model():
    return FrozenRateModel(MnlParams(a=0.05, sigma2=0.01, r0=0.03))


@pytest.fixture
def deterministic_model():
    return DeterministicRateModel(MnlParams(a=0.3, theta=0.044, sigma2=0.01, r0=0.01))


@pytest.fixture
def atm_call():
    return EquityOption(spot=100.0, strike=100.0, expiry=1.0, kind="call", sigma=0.5, rate=0.01)


@pytest.fixture
def call_portfolio(atm_call):
    return Portfolio.single(atm_call, label="call_1y")


@pytest.fixture
def equity_dynamics(atm_call):
    return EquityDynamics.for_option(atm_call)


@pytest.fixture
def coarse_equity_grid(equity_dynamics):
    return equity_dynamics.make_grid(horizon=1.0, n_space=201, n_time_per_year=50)


@pytest.fixture
def receiver_2y():
    return Portfolio.single(Swap(direction="receiver", maturity=2.0, fixed_rate=0.025), label="receiver_2y")


@pytest.fixture
def test_settings():
    return Settings(log_level="WARNING", max_workers=2, default_n_space=151, default_n_time_per_year=24)


@pytest.fixture
def flat_grid():
    return GridSpec(x_min=-1.0, x_max=1.0, n_space=41, n_time_per_year=120)


def pytest_configure(config):
    """Configure pytest with custom markers."""
    config.addinivalue_line("markers", "unit: mark test as a unit test")
    config.addinivalue_line("markers", "integration: mark test as an integration test")
    config.addinivalue_line("markers", "performance: mark test as a performance test")
    config.addinivalue_line("markers", "slow: mark test as slow running")
