"""
Crank-Nicolson solver for one-factor liability-side pricing PDEs.

The solved equation, backward in time on a uniform state grid, is

    V_t + a V_x + 1/2 b^2 V_xx - r_e V - c L_I = 0

where r_e switches node by node on the sign of V and the initial-margin term
L_I depends on the local Greeks. Both switches are frozen inside a time step
and re-evaluated by a Picard loop until the step converges.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Mapping, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import structlog
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.interpolate import CubicSpline
from scipy.linalg import solve_banded

from exceptions import ConfigError, NoConvergence, NonFiniteValue

logger = structlog.get_logger(__name__)

Coefficient = Callable[[np.ndarray, float], np.ndarray]
JumpFunction = Callable[[np.ndarray], np.ndarray]

# dates closer than this are treated as the same time node
DATE_EPS = 1e-9


class IMRule(Protocol):
    """Initial-margin rule as seen by the solver.

    ``linearize`` returns (k1, k2, k0) with L_I = k1 V_x + k2 V_xx + k0 at the
    sign pattern of the supplied derivatives.
    """

    state_dependent: bool

    def linearize(
        self, t: float, vol: np.ndarray, v_x: np.ndarray, v_xx: np.ndarray
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]: ...

    def margin(self, t: float, vol: np.ndarray, v_x: np.ndarray, v_xx: np.ndarray) -> np.ndarray: ...


class GridSpec(BaseModel):
    """Uniform state grid and time-stepping controls."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    x_min: float = Field(..., description="Lower state bound")
    x_max: float = Field(..., description="Upper state bound")
    n_space: int = Field(default=600, ge=5, description="Spatial node count")
    n_time_per_year: int = Field(default=120, ge=1, description="Time steps per year")
    picard_tol: float = Field(default=1e-10, gt=0, description="Picard tolerance per unit notional")
    picard_max: int = Field(default=50, ge=1, description="Picard iteration cap per time step")
    picard_relax_after: int = Field(default=10, ge=1, description="Plain Picard passes before under-relaxation")
    picard_relaxation: float = Field(default=0.5, gt=0, le=1, description="Weight of the new iterate once relaxed")
    freeze_stalled_switches: bool = Field(
        default=True, description="Freeze the switch pattern of a cycling step instead of failing"
    )
    rannacher_steps: int = Field(default=2, ge=0, description="Implicit steps after each restart")

    @model_validator(mode="after")
    def _check_bounds(self) -> "GridSpec":
        if not self.x_min < self.x_max:
            raise ValueError(f"x_min ({self.x_min}) must be below x_max ({self.x_max})")
        return self

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_space)

    @property
    def h(self) -> float:
        return (self.x_max - self.x_min) / (self.n_space - 1)

    def refined(self, n_space: int, n_time_per_year: Optional[int] = None) -> "GridSpec":
        update = {"n_space": n_space}
        if n_time_per_year is not None:
            update["n_time_per_year"] = n_time_per_year
        return self.model_copy(update=update)


@dataclass(frozen=True)
class PDEProblem:
    """A fully specified backward problem for ``solve``.

    ``discount_pos`` is applied where V >= 0 and ``discount_neg`` where V < 0;
    leaving ``discount_neg`` unset means no switching. ``im_cost`` is the
    signed coefficient c in front of L_I (+s_l on the bid side, -s_l on ask).
    Jumps map a date to the amount added when crossing it backwards:
    V(t-) = V(t+) + jump(x).
    """

    drift: Coefficient
    vol: Coefficient
    discount_pos: Coefficient
    terminal: Callable[[np.ndarray], np.ndarray]
    horizon: float
    discount_neg: Optional[Coefficient] = None
    im_rule: Optional[IMRule] = None
    im_cost: float = 0.0
    jumps: Mapping[float, JumpFunction] = field(default_factory=dict)
    boundary_convexity: float = 0.0
    value_scale: float = 1.0
    name: str = "problem"

    def __post_init__(self):
        if self.horizon <= 0:
            raise ConfigError(f"horizon must be positive, got {self.horizon}")
        for date in self.jumps:
            if date < -DATE_EPS or date > self.horizon + DATE_EPS:
                raise ConfigError(f"jump date {date} outside [0, {self.horizon}]")
        if self.value_scale <= 0:
            raise ConfigError("value_scale must be positive")

    @property
    def has_im(self) -> bool:
        return self.im_rule is not None and self.im_cost != 0.0

    @property
    def is_linear(self) -> bool:
        if self.discount_neg is not None:
            return False
        return not (self.has_im and self.im_rule.state_dependent)


@dataclass(frozen=True)
class JumpRecord:
    t: float
    before: np.ndarray
    after: np.ndarray


@dataclass(frozen=True)
class ValueSurface:
    """Solution of a PDEProblem at t=0, plus optional retained slices."""

    x: np.ndarray
    values: np.ndarray
    delta: np.ndarray
    gamma: np.ndarray
    log_state: bool = False
    slices: Tuple[Tuple[float, np.ndarray], ...] = ()
    jump_log: Tuple[JumpRecord, ...] = ()
    picard_iterations: int = 0
    steps: int = 0
    max_picard_residual: float = 0.0
    frozen_steps: int = 0

    def value_at(self, x0: float) -> float:
        return float(CubicSpline(self.x, self.values)(x0))

    def slice_at(self, t: float) -> np.ndarray:
        if not self.slices:
            raise KeyError("surface was solved without keep_slices")
        times = np.array([s[0] for s in self.slices])
        return self.slices[int(np.argmin(np.abs(times - t)))][1]


@dataclass(frozen=True)
class Greeks:
    x: np.ndarray
    delta: np.ndarray
    gamma: np.ndarray
    underlying: bool

    def at(self, x0: float) -> Tuple[float, float]:
        return float(np.interp(x0, self.x, self.delta)), float(np.interp(x0, self.x, self.gamma))


@dataclass(frozen=True)
class ConvergenceResult:
    n_space: List[int]
    values: List[float]
    order: float
    exact: bool


def derivatives(v: np.ndarray, h: float) -> Tuple[np.ndarray, np.ndarray]:
    """First and second differences: central inside, second-order one-sided at the ends."""
    v_x = np.empty_like(v)
    v_xx = np.empty_like(v)
    v_x[1:-1] = (v[2:] - v[:-2]) / (2.0 * h)
    v_x[0] = (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * h)
    v_x[-1] = (3.0 * v[-1] - 4.0 * v[-2] + v[-3]) / (2.0 * h)
    v_xx[1:-1] = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / (h * h)
    v_xx[0] = (2.0 * v[0] - 5.0 * v[1] + 4.0 * v[2] - v[3]) / (h * h)
    v_xx[-1] = (2.0 * v[-1] - 5.0 * v[-2] + 4.0 * v[-3] - v[-4]) / (h * h)
    return v_x, v_xx


def merge_time_grid(horizon: float, steps_per_year: int, mandatory: Sequence[float] = ()) -> np.ndarray:
    """Uniform-ish grid on [0, horizon] passing through every mandatory date."""
    anchors = {0.0, float(horizon)}
    for date in mandatory:
        if DATE_EPS < date < horizon - DATE_EPS:
            anchors.add(round(float(date), 12))
    anchors = sorted(anchors)
    times = [anchors[0]]
    for lo, hi in zip(anchors[:-1], anchors[1:]):
        n = max(1, math.ceil((hi - lo) * steps_per_year - 1e-9))
        times.extend(np.linspace(lo, hi, n + 1)[1:].tolist())
    return np.asarray(times)


def time_nodes(problem: PDEProblem, grid: GridSpec) -> np.ndarray:
    """Time grid with every jump date as a mandatory node."""
    return merge_time_grid(problem.horizon, grid.n_time_per_year, list(problem.jumps))


class CrankNicolsonStepper:
    """One backward time step with switch freezing and Picard re-solves."""

    def __init__(self, problem: PDEProblem, grid: GridSpec):
        self.problem = problem
        self.grid = grid
        self.x = grid.nodes
        self.h = grid.h
        self.n = grid.n_space
        self.tol = grid.picard_tol * problem.value_scale
        self.frozen_steps = 0
        k = problem.boundary_convexity * self.h / 2.0
        # V_xx = kappa V_x imposed on the first and last three nodes
        self._left_bc = (1.0 + k, -2.0, 1.0 - k)
        self._right_bc = (1.0 + k, -2.0, 1.0 - k)

    def operator(
        self, t: float, guess: np.ndarray
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Tridiagonal operator coefficients with switches frozen at ``guess``."""
        p = self.problem
        x, h = self.x, self.h
        a = np.broadcast_to(p.drift(x, t), x.shape).astype(float)
        b = np.broadcast_to(p.vol(x, t), x.shape).astype(float)
        r = np.broadcast_to(p.discount_pos(x, t), x.shape).astype(float)
        if p.discount_neg is not None:
            r = np.where(guess >= 0.0, r, p.discount_neg(x, t))
        diff = 0.5 * b * b
        source = np.zeros_like(x)
        if p.has_im:
            v_x, v_xx = derivatives(guess, h)
            k1, k2, k0 = p.im_rule.linearize(t, b, v_x, v_xx)
            a = a - p.im_cost * k1
            diff = np.maximum(diff - p.im_cost * k2, 0.0)
            source = -p.im_cost * np.broadcast_to(k0, x.shape)

        dd = diff / (h * h)
        half = a / (2.0 * h)
        lower = dd - half
        upper = dd + half
        diag = -2.0 * dd - r

        # upwind where the cell Peclet number exceeds one
        upwind = np.abs(a) * h > 2.0 * diff
        fwd = upwind & (a > 0.0)
        bwd = upwind & (a < 0.0)
        ah = a / h
        lower[fwd] = dd[fwd]
        upper[fwd] = dd[fwd] + ah[fwd]
        diag[fwd] = -2.0 * dd[fwd] - ah[fwd] - r[fwd]
        lower[bwd] = dd[bwd] - ah[bwd]
        upper[bwd] = dd[bwd]
        diag[bwd] = -2.0 * dd[bwd] + ah[bwd] - r[bwd]
        return lower, diag, upper, source

    def iterate(
        self, v_next: np.ndarray, guess: np.ndarray, t_lo: float, t_hi: float, theta: float
    ) -> np.ndarray:
        """Single theta-scheme solve with switches frozen at ``guess``."""
        n = self.n
        dt = t_hi - t_lo
        lower, diag, upper, source = self.operator(0.5 * (t_lo + t_hi), guess)

        rhs = np.zeros(n)
        explicit = diag[1:-1] * v_next[1:-1] + lower[1:-1] * v_next[:-2] + upper[1:-1] * v_next[2:]
        rhs[1:-1] = v_next[1:-1] + (1.0 - theta) * dt * explicit + dt * source[1:-1]

        ab = np.zeros((5, n))
        ab[2, 1:-1] = 1.0 - theta * dt * diag[1:-1]
        ab[3, :-2] = -theta * dt * lower[1:-1]
        ab[1, 2:] = -theta * dt * upper[1:-1]
        c0, c1, c2 = self._left_bc
        ab[2, 0], ab[1, 1], ab[0, 2] = c0, c1, c2
        c0, c1, c2 = self._right_bc
        ab[4, n - 3], ab[3, n - 2], ab[2, n - 1] = c0, c1, c2
        return solve_banded((2, 2), ab, rhs, check_finite=False)

    def step(
        self, v_next: np.ndarray, t_lo: float, t_hi: float, theta: float, step_index: int = 0
    ) -> Tuple[np.ndarray, int, float]:
        """
        Advance one step, re-solving until the frozen switches reproduce themselves.

        After ``picard_relax_after`` plain passes the iterate is under-relaxed. A
        relaxed loop whose best residual stops improving for that many passes is
        cycling between sign patterns; with ``freeze_stalled_switches`` the step
        is then solved once with the switches held at the relaxed iterate.

        Raises:
            NoConvergence: if the loop runs out of passes without settling or stalling
        """
        if self.problem.is_linear:
            return self.iterate(v_next, v_next, t_lo, t_hi, theta), 1, 0.0
        grid = self.grid
        omega = grid.picard_relaxation
        guess = v_next
        residual = best = math.inf
        since_best = 0
        for iteration in range(1, grid.picard_max + 1):
            v = self.iterate(v_next, guess, t_lo, t_hi, theta)
            residual = float(np.max(np.abs(v - guess)))
            if residual <= self.tol:
                return v, iteration, residual
            if residual < 0.9 * best:
                best, since_best = residual, 0
            else:
                since_best += 1
            if iteration >= grid.picard_relax_after:
                v = omega * v + (1.0 - omega) * guess
                if grid.freeze_stalled_switches and since_best >= grid.picard_relax_after:
                    self.frozen_steps += 1
                    logger.warning(
                        "picard_switches_frozen",
                        problem=self.problem.name,
                        t=t_lo,
                        step=step_index,
                        passes=iteration,
                        residual=residual,
                    )
                    return self.iterate(v_next, v, t_lo, t_hi, theta), iteration + 1, residual
            guess = v
        raise NoConvergence(
            f"Picard loop did not converge at t={t_lo:.6f} after {self.grid.picard_max} passes",
            step=step_index,
            residual=residual,
        )


def _check_finite(v: np.ndarray, t: float) -> None:
    bad = ~np.isfinite(v)
    if bad.any():
        raise NonFiniteValue(t, int(bad.sum()))


def solve(
    problem: PDEProblem, grid: GridSpec, keep_slices: bool = False, log_state: bool = False
) -> ValueSurface:
    """
    Backward induction from the terminal payoff to t=0.

    Args:
        problem: Coefficients, payoff, switches and jumps
        grid: State grid and stepping controls
        keep_slices: Retain every time slice and jump record
        log_state: Tag the surface as living on a log-underlying grid

    Returns:
        ValueSurface at t=0
    """
    stepper = CrankNicolsonStepper(problem, grid)
    x = stepper.x
    jumps = {round(float(d), 12): f for d, f in problem.jumps.items()}

    def jump_at(t: float) -> Optional[JumpFunction]:
        for date, fn in jumps.items():
            if abs(date - t) <= DATE_EPS:
                return fn
        return None

    slices: List[Tuple[float, np.ndarray]] = []
    records: List[JumpRecord] = []

    def apply_jump(v: np.ndarray, t: float) -> np.ndarray:
        fn = jump_at(t)
        if fn is None:
            return v
        after = v + np.broadcast_to(fn(x), x.shape)
        if keep_slices:
            records.append(JumpRecord(t=t, before=v.copy(), after=after.copy()))
        return after

    times = time_nodes(problem, grid)
    v = np.broadcast_to(problem.terminal(x), x.shape).astype(float).copy()
    _check_finite(v, problem.horizon)
    v = apply_jump(v, float(times[-1]))
    if keep_slices:
        slices.append((float(times[-1]), v.copy()))

    restart = grid.rannacher_steps
    total_iterations = 0
    worst_residual = 0.0
    for k in range(len(times) - 1, 0, -1):
        t_lo, t_hi = float(times[k - 1]), float(times[k])
        theta = 1.0 if restart > 0 else 0.5
        restart -= 1
        v, iterations, residual = stepper.step(v, t_lo, t_hi, theta, step_index=k - 1)
        total_iterations += iterations
        worst_residual = max(worst_residual, residual)
        _check_finite(v, t_lo)
        if jump_at(t_lo) is not None:
            v = apply_jump(v, t_lo)
            restart = grid.rannacher_steps
        if keep_slices:
            slices.append((t_lo, v.copy()))

    v_x, v_xx = derivatives(v, grid.h)
    logger.debug(
        "pde_solve_finished",
        problem=problem.name,
        steps=len(times) - 1,
        picard_iterations=total_iterations,
        max_picard_residual=worst_residual,
        frozen_steps=stepper.frozen_steps,
    )
    return ValueSurface(
        x=x,
        values=v,
        delta=v_x,
        gamma=v_xx,
        log_state=log_state,
        slices=tuple(slices),
        jump_log=tuple(records),
        picard_iterations=total_iterations,
        steps=len(times) - 1,
        max_picard_residual=worst_residual,
        frozen_steps=stepper.frozen_steps,
    )


def greeks(
    surface: ValueSurface, t: Optional[float] = None, underlying: Optional[bool] = None
) -> Greeks:
    """
    Delta and gamma from the same stencil the IM rule uses while solving.

    On log-state surfaces the derivatives are converted to the underlying
    u = exp(x) unless ``underlying`` is False.
    """
    values = surface.values if t is None else surface.slice_at(t)
    h = float(surface.x[1] - surface.x[0])
    v_x, v_xx = derivatives(values, h)
    to_underlying = surface.log_state if underlying is None else underlying and surface.log_state
    if not to_underlying:
        return Greeks(x=surface.x, delta=v_x, gamma=v_xx, underlying=False)
    u = np.exp(surface.x)
    return Greeks(x=surface.x, delta=v_x / u, gamma=(v_xx - v_x) / (u * u), underlying=True)


def convergence_study(
    problem: PDEProblem, grid_ladder: Sequence[GridSpec], x0: float
) -> ConvergenceResult:
    """Richardson estimate of the spatial order from the last three grids of a ladder."""
    if len(grid_ladder) < 3:
        raise ConfigError("convergence study needs at least three grids")
    values = [solve(problem, g).value_at(x0) for g in grid_ladder]
    g1, g2, g3 = grid_ladder[-3:]
    v1, v2, v3 = values[-3:]
    d12, d23 = abs(v1 - v2), abs(v2 - v3)
    scale = max(1.0, abs(v3)) * 1e-13
    if d12 <= scale and d23 <= scale:
        return ConvergenceResult([g.n_space for g in grid_ladder], values, float("nan"), True)
    ratio = g1.h / g2.h
    order = math.inf if d23 <= scale else math.log(d12 / d23) / math.log(ratio)
    logger.info("convergence_study", values=values, order=order)
    return ConvergenceResult([g.n_space for g in grid_ladder], values, order, False)


def dump_surface_csv(
    surface: ValueSurface, path: Union[str, Path], t: Optional[float] = None
) -> Path:
    """Write (state, value, delta, gamma) for one slice."""
    g = greeks(surface, t=t, underlying=False)
    values = surface.values if t is None else surface.slice_at(t)
    frame = pd.DataFrame({"state": surface.x, "value": values, "delta": g.delta, "gamma": g.gamma})
    path = Path(path)
    frame.to_csv(path, index=False)
    return path
