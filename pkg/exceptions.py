"""
Error types raised by the pricing engine.

Configuration problems derive from ConfigError and map to CLI exit code 2;
numerical failures derive from NumericalError and map to exit code 3.
"""

from typing import Optional, Sequence


class XvaError(Exception):
    """Base class for every error raised by the engine."""


class ConfigError(XvaError, ValueError):
    """Run configuration or instrument definition is invalid."""


class InvalidTenor(ConfigError):
    """Instrument dates do not tile into whole accrual periods."""

    def __init__(self, start: float, maturity: float, freq: int):
        self.start = start
        self.maturity = maturity
        self.freq = freq
        super().__init__(
            f"maturity - start = {maturity - start:g}y is not a multiple of 1/{freq}y"
        )


class InvalidRatio(ConfigError):
    """Net replacement cost exceeds gross replacement cost."""


class MissingZcb(XvaError, KeyError):
    """A bond surface was requested that the provider never prepared."""

    def __init__(self, reset: float, pay: float):
        self.reset = reset
        self.pay = pay
        super().__init__(f"no zero-coupon surface prepared for ({reset:g}, {pay:g})")

    def __str__(self) -> str:
        return self.args[0]


class NumericalError(XvaError):
    """A solver could not produce a trustworthy number."""


class NoConvergence(NumericalError):
    """An iteration did not reach its tolerance within the allowed budget."""

    def __init__(
        self,
        message: str,
        step: Optional[int] = None,
        residual: Optional[float] = None,
        residuals: Optional[Sequence[float]] = None,
    ):
        self.step = step
        self.residual = residual
        self.residuals = list(residuals) if residuals is not None else None
        super().__init__(message)


class NonFiniteValue(NumericalError):
    """A node value became NaN or infinite."""

    def __init__(self, t: float, count: int):
        self.t = t
        self.count = count
        super().__init__(f"{count} non-finite node value(s) at t={t:.6f}")


class RegressionSingular(NumericalError):
    """Monte-Carlo regression design matrix is rank deficient."""


class DegenerateAnnuity(NumericalError):
    """Annuity used for yield-value conversion is not positive."""


class DegenerateIM(NumericalError):
    """Model initial margin is zero so no multiplier can be calibrated."""
