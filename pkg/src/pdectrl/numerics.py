"""Grid, quadrature, banded solves, a Bessel-ratio series and seeded randomness.

Everything here is a pure function of its inputs except :class:`Rng`, which
owns a mutable stream and must not be shared between concurrent tasks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, NumericalFailureError


@dataclass(frozen=True)
class Grid:
    """Uniform grid on [0, 1] with ``n_points`` nodes."""

    n_points: int = 101

    def __post_init__(self):
        if self.n_points < 3:
            raise InvalidArgumentError(f"grid needs at least 3 points, got {self.n_points}")

    @classmethod
    def from_dx(cls, dx: float) -> "Grid":
        n = int(round(1.0 / dx)) + 1
        grid = cls(n)
        if abs(grid.dx - dx) > 1e-12:
            raise InvalidArgumentError(f"dx={dx} does not divide [0, 1] evenly")
        return grid

    @property
    def dx(self) -> float:
        return 1.0 / (self.n_points - 1)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_points)


def trapezoid_weights(n: int, dx: float) -> np.ndarray:
    w = np.full(n, dx)
    w[0] = w[-1] = 0.5 * dx
    return w


def trapezoid_integrate(values, dx: float, n_points: int | None = None):
    """Composite trapezoid rule along the last axis.

    Computes ``dx * (sum(values) - (first + last) / 2)``. Works on batches:
    a ``(m, n)`` array yields ``m`` integrals.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 0 or values.shape[-1] < 2:
        raise InvalidArgumentError("need at least two samples to integrate")
    if n_points is not None and values.shape[-1] != n_points:
        raise InvalidArgumentError(
            f"expected {n_points} samples, got {values.shape[-1]}")
    total = values.sum(axis=-1)
    return dx * (total - 0.5 * (values[..., 0] + values[..., -1]))


def cumulative_trapezoid(values, dx: float, axis: int = -1) -> np.ndarray:
    """Running trapezoid integral, zero at the first sample."""
    values = np.moveaxis(np.asarray(values, dtype=float), axis, -1)
    out = np.zeros_like(values)
    out[..., 1:] = np.cumsum(0.5 * dx * (values[..., 1:] + values[..., :-1]), axis=-1)
    return np.moveaxis(out, -1, axis)


class TridiagonalSolver:
    """Thomas algorithm with the elimination sweep done once.

    ``lower`` and ``upper`` have length ``n - 1``. The factorization is reused
    for every right-hand side passed to :meth:`solve`, which may be a vector
    or an ``(n, m)`` array of ``m`` right-hand sides.
    """

    def __init__(self, lower, diag, upper):
        lower = np.asarray(lower, dtype=float)
        diag = np.asarray(diag, dtype=float)
        upper = np.asarray(upper, dtype=float)
        n = diag.shape[0]
        if lower.shape != (n - 1,) or upper.shape != (n - 1,):
            raise InvalidArgumentError(
                f"band lengths {lower.shape}, {diag.shape}, {upper.shape} are inconsistent")
        # pivots[i] is the eliminated diagonal, ratio[i] multiplies the row above
        pivots = np.empty(n)
        ratio = np.zeros(n)
        pivots[0] = diag[0]
        for i in range(1, n):
            if pivots[i - 1] == 0.0:
                raise NumericalFailureError(f"zero pivot at row {i - 1}")
            ratio[i] = lower[i - 1] / pivots[i - 1]
            pivots[i] = diag[i] - ratio[i] * upper[i - 1]
        if pivots[-1] == 0.0:
            raise NumericalFailureError(f"zero pivot at row {n - 1}")
        self.n = n
        self._pivots = pivots
        self._ratio = ratio
        self._upper = upper
        # python floats are much faster than numpy scalars in the sweeps below
        self._p = pivots.tolist()
        self._r = ratio.tolist()
        self._u = upper.tolist()

    def solve(self, rhs) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape[0] != self.n:
            raise InvalidArgumentError(f"rhs has {rhs.shape[0]} rows, matrix has {self.n}")
        if rhs.ndim == 1:
            return np.array(self._solve_scalar(rhs.tolist()))
        y = rhs.copy()
        r, p, u = self._ratio, self._pivots, self._upper
        for i in range(1, self.n):
            y[i] -= r[i] * y[i - 1]
        y[-1] /= p[-1]
        for i in range(self.n - 2, -1, -1):
            y[i] = (y[i] - u[i] * y[i + 1]) / p[i]
        return y

    def _solve_scalar(self, y: list) -> list:
        r, p, u = self._r, self._p, self._u
        n = self.n
        for i in range(1, n):
            y[i] -= r[i] * y[i - 1]
        y[n - 1] /= p[n - 1]
        for i in range(n - 2, -1, -1):
            y[i] = (y[i] - u[i] * y[i + 1]) / p[i]
        return y


def solve_tridiagonal(lower, diag, upper, rhs) -> np.ndarray:
    """Solve ``A x = rhs`` for tridiagonal ``A`` given by its three bands."""
    return TridiagonalSolver(lower, diag, upper).solve(rhs)


def bessel_kernel_ratio(z: float) -> float:
    """Return I1(z)/z from its power series.

    The series is ``sum_m (z/2)^(2m) / (m! (m+1)!) / 2``, summed until a term
    drops below 1e-16 of the running total.
    """
    if z < 0:
        raise InvalidArgumentError(f"z must be non-negative, got {z}")
    q = 0.25 * z * z
    term = 0.5
    total = term
    m = 0
    while True:
        m += 1
        term *= q / (m * (m + 1))
        total += term
        if term < 1e-16 * total:
            return total


class Rng:
    """Seeded random stream.

    Uniform draws come from a PCG64 generator; normal draws use the
    Box-Muller transform on pairs of uniforms (cosine branch for scalars,
    both branches for arrays).
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def random(self, size=None):
        """Uniform on [0, 1)."""
        return self._gen.random(size)

    def uniform(self, lo: float, hi: float, size=None):
        if not lo < hi:
            raise InvalidArgumentError(f"need lo < hi, got [{lo}, {hi})")
        return lo + (hi - lo) * self._gen.random(size)

    def normal(self, size=None):
        if size is None:
            u1, u2 = self._gen.random(2)
            return math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2)
        count = int(np.prod(size))
        half = (count + 1) // 2
        u = self._gen.random((2, half))
        radius = np.sqrt(-2.0 * np.log1p(-u[0]))
        angle = 2.0 * np.pi * u[1]
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])
        return z[:count].reshape(size)

    def integers(self, high: int, size=None):
        """Uniform integers in [0, high)."""
        return self._gen.integers(0, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def derive_seed(master: int, *keys: int) -> int:
    """Deterministic 64-bit child seed for ``(master, *keys)``."""
    seq = np.random.SeedSequence(entropy=int(master), spawn_key=tuple(int(k) for k in keys))
    return int(seq.generate_state(1, np.uint64)[0])
