"""Backstepping kernels and the boundary feedback ``U = int_0^1 k(1, y) u(y) dy``.

Hyperbolic benchmark: the kernel has convolution form ``k(x, y) = F(x - y)``
with ``F(x) = -beta(x) + int_0^x F(x - y) beta(y) dy``.

Parabolic benchmark: ``k_xx - k_yy = lambda(y) k`` with ``k(x, 0) = 0`` and
``k(x, x) = -1/2 int_0^x lambda``. In characteristic variables
``xi = x + y``, ``eta = x - y`` this becomes the integral equation::

    G(xi, eta) = -1/4 int_eta^xi lambda(t/2) dt
                 + 1/4 int_eta^xi int_0^eta lambda((t - s)/2) G(t, s) ds dt

Both are solved by successive approximation with trapezoid quadrature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, NumericalFailureError
from .numerics import Grid, cumulative_trapezoid, trapezoid_integrate
from .pde_env import HYPERBOLIC, PARABOLIC, CoefficientFn

TOLERANCE = 1e-12
MAX_ITERATIONS = 200


@dataclass(frozen=True)
class HyperbolicKernel:
    F: np.ndarray
    residual: float
    iterations: int

    @property
    def gain_row(self) -> np.ndarray:
        """``k(1, y_j) = F(1 - y_j)``."""
        return self.F[::-1]


@dataclass(frozen=True)
class ParabolicKernel:
    k_table: np.ndarray
    gain_row: np.ndarray
    residual: float
    iterations: int


def _volterra_map(F, beta, dx):
    conv = np.convolve(F, beta)[: F.shape[0]]
    # trapezoid end corrections: j = 0 contributes F_i beta_0, j = i contributes F_0 beta_i
    integral = dx * (conv - 0.5 * (F * beta[0] + F[0] * beta))
    integral[0] = 0.0
    return -beta + integral


def solve_hyperbolic_kernel(coeff: CoefficientFn, grid: Grid) -> HyperbolicKernel:
    """Picard iteration for the convolution kernel ``F`` starting from ``-beta``."""
    if coeff.kind != HYPERBOLIC:
        raise InvalidArgumentError(f"expected a hyperbolic coefficient, got {coeff.kind!r}")
    beta = np.asarray(coeff.samples, dtype=float)
    if beta.shape != (grid.n_points,):
        raise InvalidArgumentError("coefficient does not match the grid")
    dx = grid.dx
    F = -beta.copy()
    for it in range(1, MAX_ITERATIONS + 1):
        F_new = _volterra_map(F, beta, dx)
        delta = np.max(np.abs(F_new - F))
        F = F_new
        if not np.isfinite(delta):
            break
        if delta <= TOLERANCE:
            residual = float(np.max(np.abs(_volterra_map(F, beta, dx) - F)))
            return HyperbolicKernel(F, residual, it)
    raise NumericalFailureError(
        f"hyperbolic kernel did not converge in {MAX_ITERATIONS} iterations (gamma={coeff.gamma})")


class _GoursatMap:
    """The affine map ``G -> A + 1/4 (double integral of lambda G)`` on the lattice.

    Lattice node ``(i, j)`` is ``xi = i h``, ``eta = j h`` with ``h = 2 dx``,
    i.e. ``x = (i + j) dx``, ``y = (i - j) dx``. Only ``0 <= j <= i`` and
    ``i + j <= N`` (``x <= 1``) are kept; other entries stay zero.
    """

    def __init__(self, lam: np.ndarray, dx: float):
        N = lam.shape[0] - 1
        self.N = N
        self.h = 2.0 * dx
        i, j = np.indices((N + 1, N + 1))
        self.mask = (j <= i) & (i + j <= N)
        # lambda((t - s)/2) at node (t, s) is lambda(y) with y index t - s
        self.lam_ts = np.where(j <= i, lam[np.clip(i - j, 0, N)], 0.0)
        # -1/4 int_eta^xi lambda(t/2) dt: lambda(t/2) at lattice t = a h is lam[a]
        cum = cumulative_trapezoid(lam, self.h)
        self.source = np.where(self.mask, -0.25 * (cum[i] - cum[j]), 0.0)

    def __call__(self, G: np.ndarray) -> np.ndarray:
        h = self.h
        H = self.lam_ts * G
        # inner[t, eta] = int_0^eta H(t, s) ds
        inner = cumulative_trapezoid(H, h, axis=1)
        # outer[xi, eta] = int_eta^xi inner(t, eta) dt
        run = cumulative_trapezoid(inner, h, axis=0)
        diag = np.diagonal(run)  # run[eta, eta]
        outer = run - diag[np.newaxis, :]
        return np.where(self.mask, self.source + 0.25 * outer, 0.0)


def solve_parabolic_kernel(coeff: CoefficientFn, grid: Grid) -> ParabolicKernel:
    """Picard iteration for the Goursat problem, mapped back to ``k(x_a, y_b)``."""
    if coeff.kind != PARABOLIC:
        raise InvalidArgumentError(f"expected a parabolic coefficient, got {coeff.kind!r}")
    lam = np.asarray(coeff.samples, dtype=float)
    if lam.shape != (grid.n_points,):
        raise InvalidArgumentError("coefficient does not match the grid")
    T = _GoursatMap(lam, grid.dx)
    G = T.source.copy()
    for it in range(1, MAX_ITERATIONS + 1):
        G_new = T(G)
        delta = np.max(np.abs(G_new - G))
        G = G_new
        if not np.isfinite(delta):
            break
        if delta <= TOLERANCE:
            residual = float(np.max(np.abs(T(G) - G)))
            table = _lattice_to_xy(G, T.N)
            return ParabolicKernel(table, table[-1].copy(), residual, it)
    raise NumericalFailureError(
        f"parabolic kernel did not converge in {MAX_ITERATIONS} iterations (gamma={coeff.gamma})")


def _lattice_to_xy(G: np.ndarray, N: int) -> np.ndarray:
    """Lower-triangular ``k[a, b] = k(x_a, y_b)``.

    Nodes with ``a + b`` even sit on the lattice; the others are linearly
    interpolated in ``y`` between ``b - 1`` and ``b + 1`` (``k(x, 0) = 0``).
    """
    k = np.zeros((N + 1, N + 1))
    a, b = np.tril_indices(N + 1)
    even = (a + b) % 2 == 0
    ae, be = a[even], b[even]
    k[ae, be] = G[(ae + be) // 2, (ae - be) // 2]
    ao, bo = a[~even & (b > 0)], b[~even & (b > 0)]
    k[ao, bo] = 0.5 * (k[ao, bo - 1] + k[ao, bo + 1])
    return k


def solve_kernel(coeff: CoefficientFn, grid: Grid):
    if coeff.kind == HYPERBOLIC:
        return solve_hyperbolic_kernel(coeff, grid)
    return solve_parabolic_kernel(coeff, grid)


def backstepping_control(kernel, state, dx: float):
    """Trapezoid quadrature of ``k(1, y) u(y)``; ``state`` may be a batch."""
    gain = kernel.gain_row
    state = np.asarray(state, dtype=float)
    if state.shape[-1] != gain.shape[0]:
        raise InvalidArgumentError(
            f"state has {state.shape[-1]} samples, kernel has {gain.shape[0]}")
    return trapezoid_integrate(gain * state, dx)


class BacksteppingController:
    """Callable state feedback ``values -> U`` for :func:`pdectrl.pde_env.simulate`."""

    def __init__(self, kernel, dx: float):
        self.kernel = kernel
        self.dx = dx

    def __call__(self, values):
        return backstepping_control(self.kernel, values, self.dx)
