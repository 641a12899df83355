"""Discrete-time environments for the two boundary-actuated benchmarks.

Hyperbolic benchmark (explicit upwind)::

    u_t = u_x + beta(x) u(0, t),        u(1, t) = U(t)

Parabolic benchmark (backward Euler)::

    u_t = u_xx + lambda(x) u,           u(0, t) = 0,  u(1, t) = U(t)

One RL action is held constant over ``steps_per_action`` solver steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import ConfigError, EnvironmentFault, InvalidArgumentError
from .numerics import Grid, Rng, TridiagonalSolver, trapezoid_integrate

HYPERBOLIC = "hyperbolic"
PARABOLIC = "parabolic"
KINDS = (HYPERBOLIC, PARABOLIC)

AMPLITUDE = {HYPERBOLIC: 5.0, PARABOLIC: 50.0}
GAMMA_RANGE = {HYPERBOLIC: (5.5, 7.0), PARABOLIC: (8.0, 12.0)}
HORIZON = {HYPERBOLIC: 5.0, PARABOLIC: 1.0}
STEPS_PER_ACTION = {HYPERBOLIC: 50, PARABOLIC: 10}
# solver steps between recorded dataset samples
SAMPLE_EVERY = {HYPERBOLIC: 50, PARABOLIC: 100}


def check_kind(kind: str) -> str:
    if kind not in KINDS:
        raise InvalidArgumentError(f"unknown benchmark kind {kind!r}; expected one of {KINDS}")
    return kind


@dataclass(frozen=True)
class CoefficientFn:
    kind: str
    gamma: float
    samples: np.ndarray = field(repr=False)


def sample_coefficient(kind: str, gamma: float, grid: Grid) -> CoefficientFn:
    """Chebyshev-form coefficient ``A cos(gamma arccos x)`` on the grid."""
    check_kind(kind)
    if not gamma > 0:
        raise InvalidArgumentError(f"gamma must be positive, got {gamma}")
    samples = AMPLITUDE[kind] * np.cos(gamma * np.arccos(grid.x))
    samples.flags.writeable = False
    return CoefficientFn(kind, float(gamma), samples)


def l2_norm(values, dx: float):
    """L2 norm on [0, 1] by the trapezoid rule; batched over leading axes."""
    values = np.asarray(values, dtype=float)
    return np.sqrt(trapezoid_integrate(values * values, dx))


def hyperbolic_solver_step(values, beta, boundary_control, dt: float, dx: float) -> np.ndarray:
    """One explicit upwind step. ``values`` may be ``(n,)`` or ``(m, n)``."""
    if dt > dx:
        raise ConfigError(f"CFL violated: dt/dx = {dt / dx:.3g} > 1")
    u = np.asarray(values, dtype=float)
    out = np.empty_like(u)
    u0 = u[..., :1]
    out[..., :-1] = u[..., :-1] + dt * ((u[..., 1:] - u[..., :-1]) / dx + beta[:-1] * u0)
    out[..., -1] = boundary_control
    return out


class ParabolicStepper:
    """Backward-Euler step with the interior tridiagonal matrix factored once."""

    def __init__(self, lam, dt: float, dx: float):
        lam = np.asarray(lam, dtype=float)
        self.dt = dt
        self.dx = dx
        self.r = dt / (dx * dx)
        m = lam.shape[0] - 2
        diag = 1.0 + 2.0 * self.r - dt * lam[1:-1]
        off = np.full(m - 1, -self.r)
        # diagonal dominance guarantees a pivot-free sweep
        if np.any(np.abs(diag) <= 2.0 * self.r):
            raise ConfigError("implicit parabolic matrix is not diagonally dominant")
        self._solver = TridiagonalSolver(off, diag, off)

    def __call__(self, values, boundary_control) -> np.ndarray:
        u = np.asarray(values, dtype=float)
        out = np.empty_like(u)
        if u.ndim == 1:
            rhs = u[1:-1].copy()
            rhs[-1] += self.r * boundary_control
            out[1:-1] = self._solver.solve(rhs)
        else:
            rhs = u[:, 1:-1].T.copy()
            rhs[-1] += self.r * np.asarray(boundary_control)
            out[:, 1:-1] = self._solver.solve(rhs).T
        out[..., 0] = 0.0
        out[..., -1] = boundary_control
        return out


def parabolic_solver_step(values, lam, boundary_control, dt: float, dx: float) -> np.ndarray:
    """One backward-Euler step of the reaction-diffusion benchmark."""
    return ParabolicStepper(lam, dt, dx)(values, boundary_control)


def make_stepper(coeff: CoefficientFn, dt: float, dx: float) -> Callable:
    """Return ``step(values, U)`` for the coefficient's benchmark."""
    if coeff.kind == HYPERBOLIC:
        if dt > dx:
            raise ConfigError(f"CFL violated: dt/dx = {dt / dx:.3g} > 1")
        beta = coeff.samples
        return lambda values, control: hyperbolic_solver_step(values, beta, control, dt, dx)
    return ParabolicStepper(coeff.samples, dt, dx)


def simulate(coeff: CoefficientFn, u0, n_steps: int, dt: float, controller=None,
             hold: int = 1, record_every: int = 1):
    """Run ``n_steps`` solver steps from ``u0`` under a state-feedback controller.

    ``controller(values) -> U`` is evaluated every ``hold`` solver steps on the
    current state (``None`` means open loop, U = 0). ``u0`` may hold a batch
    of initial states. Returns ``(times, states, controls)`` recorded every
    ``record_every`` steps starting at step 0; ``controls[k]`` is the input
    applied from the recorded state onwards.
    """
    u = np.array(u0, dtype=float)
    dx = 1.0 / (u.shape[-1] - 1)
    step = make_stepper(coeff, dt, dx)
    batch_shape = u.shape[:-1]
    times, states, controls = [], [], []
    control = np.zeros(batch_shape)
    for k in range(n_steps + 1):
        if k % hold == 0 and controller is not None:
            control = controller(u)
        if k % record_every == 0:
            times.append(k * dt)
            states.append(u.copy())
            controls.append(np.array(control, dtype=float, copy=True))
        if k == n_steps:
            break
        u = step(u, control)
    return np.array(times), np.array(states), np.array(controls)


@dataclass(frozen=True)
class EnvConfig:
    kind: str
    gamma: float
    action_bound: float
    n_points: int = 101
    dt: float = 1e-3
    horizon: float | None = None
    steps_per_action: int | None = None
    blowup_limit: float = 100.0
    sigma: float = 10.0
    eta_rew: float = 100.0
    zeta: float = 0.2
    u0_range: tuple = (1.0, 10.0)
    reward_mode: str = "difference"

    def __post_init__(self):
        check_kind(self.kind)
        if self.horizon is None:
            object.__setattr__(self, "horizon", HORIZON[self.kind])
        if self.steps_per_action is None:
            object.__setattr__(self, "steps_per_action", STEPS_PER_ACTION[self.kind])
        if not self.action_bound > 0:
            raise ConfigError(f"action bound must be positive, got {self.action_bound}")
        if not self.zeta > 0:
            raise ConfigError(f"zeta must be positive, got {self.zeta}")
        if self.reward_mode not in ("difference", "state_norm"):
            raise ConfigError(f"unknown reward mode {self.reward_mode!r}")
        lo, hi = self.u0_range
        if not lo < hi:
            raise ConfigError(f"empty initial-condition range {self.u0_range}")
        steps = self.horizon / (self.dt * self.steps_per_action)
        if abs(steps - round(steps)) > 1e-9 or round(steps) < 1:
            raise ConfigError(
                f"horizon {self.horizon} is not a whole number of {self.steps_per_action}-step actions")
        if self.kind == HYPERBOLIC and self.dt > self.grid.dx:
            raise ConfigError(f"CFL violated: dt/dx = {self.dt / self.grid.dx:.3g} > 1")

    @property
    def grid(self) -> Grid:
        return Grid(self.n_points)

    @property
    def n_interactions(self) -> int:
        return int(round(self.horizon / (self.dt * self.steps_per_action)))

    def with_horizon(self, horizon: float) -> "EnvConfig":
        return replace(self, horizon=horizon)


@dataclass
class StateField:
    values: np.ndarray
    time: float = 0.0


@dataclass
class EpisodeRecord:
    action_abs_sum: float = 0.0
    final_state_norm: float = 0.0
    step_count: int = 0


def terminal_bonus(record: EpisodeRecord, sigma: float, eta_rew: float, zeta: float) -> float:
    """Episode-end bonus: zero unless the final state norm is within ``zeta``."""
    if record.final_state_norm > zeta:
        return 0.0
    return sigma - record.action_abs_sum / eta_rew - record.final_state_norm


class PdeEnv:
    """Gym-style environment: ``reset()`` then repeated ``step(action)``.

    The coefficient is fixed by ``config.gamma`` (or passed explicitly, e.g.
    for model-mismatch evaluation). Observations are the raw grid values;
    ``coefficient`` exposes the samples consumed by DeepONet extractors.
    """

    def __init__(self, config: EnvConfig, rng: Rng | None = None,
                 coefficient: CoefficientFn | None = None):
        self.config = config
        self.rng = rng if rng is not None else Rng(0)
        self.grid = config.grid
        self.dx = self.grid.dx
        self.coefficient = coefficient or sample_coefficient(config.kind, config.gamma, self.grid)
        self._step = make_stepper(self.coefficient, config.dt, self.dx)
        self.state = StateField(np.zeros(self.grid.n_points))
        self.record = EpisodeRecord()
        self.last_bonus = 0.0
        self.done = True

    def reset(self, u0: float | None = None) -> np.ndarray:
        """Start an episode from the constant profile ``u0`` (random if omitted)."""
        if u0 is None:
            u0 = float(self.rng.uniform(*self.config.u0_range))
        self.state = StateField(np.full(self.grid.n_points, float(u0)), 0.0)
        self.record = EpisodeRecord(final_state_norm=float(l2_norm(self.state.values, self.dx)))
        self.last_bonus = 0.0
        self.done = False
        return self.state.values.copy()

    def step(self, action: float):
        """Hold ``action`` for one interaction step.

        Returns ``(next_state, reward, done, truncated_by_blowup)``. At the end
        of an episode the terminal bonus is already folded into ``reward``.
        """
        cfg = self.config
        bound = cfg.action_bound
        action = min(max(float(action), -bound), bound)
        u = self.state.values
        prev = u
        for _ in range(cfg.steps_per_action):
            u = self._step(u, action)
        if not np.all(np.isfinite(u)):
            self.done = True
            raise EnvironmentFault(
                f"non-finite state at t={self.state.time:.4f} after action {action}")
        self.state = StateField(u, self.state.time + cfg.steps_per_action * cfg.dt)
        norm = float(l2_norm(u, self.dx))
        if cfg.reward_mode == "difference":
            reward = -float(l2_norm(u - prev, self.dx))
        else:
            reward = -norm
        rec = self.record
        rec.action_abs_sum += abs(action)
        rec.step_count += 1
        rec.final_state_norm = norm
        truncated = norm > cfg.blowup_limit
        done = truncated or rec.step_count >= cfg.n_interactions
        self.last_bonus = 0.0
        if done:
            self.last_bonus = terminal_bonus(rec, cfg.sigma, cfg.eta_rew, cfg.zeta)
            reward += self.last_bonus
        self.done = done
        return u.copy(), reward, done, truncated


def open_loop_growth(kind: str, gamma: float, u0: float = 9.0, horizon: float | None = None,
                     n_points: int = 101, dt: float = 1e-3) -> float:
    """Ratio ``||u(T)|| / ||u0||`` with zero boundary input."""
    grid = Grid(n_points)
    coeff = sample_coefficient(kind, gamma, grid)
    horizon = HORIZON[kind] if horizon is None else horizon
    n_steps = int(round(horizon / dt))
    _, states, _ = simulate(coeff, np.full(n_points, u0), n_steps, dt, record_every=n_steps)
    norms = l2_norm(states, grid.dx)
    return float(norms[-1] / norms[0]) if norms[0] > 0 else math.nan
