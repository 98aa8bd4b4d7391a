"""Grid-based numerical substrate.

Everything time-dependent in the package lives on a uniform :class:`TimeGrid`
and is represented by a :class:`TimeGridFunction` (node values with linear
interpolation in between). The helpers here are deliberately deterministic:
fixed-step RK4, composite trapezoid quadrature and RNG-free sphere lattices.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.ndimage import maximum_filter1d, minimum_filter1d
from scipy.special import ndtri

__all__ = [
    "GridDomainError",
    "IntegrationBlowup",
    "TimeGrid",
    "TimeGridFunction",
    "UnitSphereSample",
    "integrate_ode",
    "integrate_trapezoid",
    "cumulative_trapezoid",
    "finite_difference",
    "windowed_max",
    "windowed_min",
    "smooth_upper_envelope",
    "unit_sphere_samples",
]

# relative tolerance (in units of dt) used to snap times onto grid nodes
_SNAP = 1e-9


class GridDomainError(ValueError):
    """Raised when a time lies outside the span of a grid."""


class IntegrationBlowup(ArithmeticError):
    """Raised when an integrator produces a non-finite state."""

    def __init__(self, time: float, message: str = ""):
        self.time = float(time)
        super().__init__(message or f"non-finite state at t={self.time:.6g}")


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_start + i*dt`` for ``i = 0..count-1``."""

    t_start: float
    dt: float
    count: int

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError(f"dt must be positive and finite, got {self.dt}")
        if self.count < 2:
            raise ValueError(f"a grid needs at least 2 nodes, got {self.count}")

    @classmethod
    def from_span(cls, t_start: float, t_end: float, dt: float) -> "TimeGrid":
        if not dt > 0:
            raise ValueError(f"dt must be positive, got {dt}")
        count = int(math.floor((t_end - t_start) / dt + _SNAP)) + 1
        return cls(float(t_start), float(dt), count)

    @property
    def t_end(self) -> float:
        return self.t_start + (self.count - 1) * self.dt

    @property
    def nodes(self) -> np.ndarray:
        return self.t_start + self.dt * np.arange(self.count)

    def contains(self, t: float) -> bool:
        tol = _SNAP * self.dt
        return self.t_start - tol <= t <= self.t_end + tol

    def index_of(self, t: float) -> int:
        """Index of the node equal to ``t`` (up to snapping tolerance)."""
        r = (t - self.t_start) / self.dt
        i = int(round(r))
        if abs(r - i) > 1e-6 or not 0 <= i < self.count:
            raise GridDomainError(f"t={t} is not a node of {self}")
        return i

    def ceil_index(self, t: float) -> int:
        """Smallest node index whose time is >= t (snapped)."""
        r = (t - self.t_start) / self.dt
        i = int(math.ceil(r - _SNAP))
        return min(max(i, 0), self.count - 1)

    def floor_index(self, t: float) -> int:
        r = (t - self.t_start) / self.dt
        i = int(math.floor(r + _SNAP))
        return min(max(i, 0), self.count - 1)

    def subgrid(self, i0: int, i1: int) -> "TimeGrid":
        """Grid made of nodes ``i0..i1`` inclusive."""
        if not 0 <= i0 < i1 < self.count:
            raise GridDomainError(f"bad node range [{i0}, {i1}] for {self.count} nodes")
        return TimeGrid(self.t_start + i0 * self.dt, self.dt, i1 - i0 + 1)

    def refine(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.t_start, self.dt / factor, (self.count - 1) * factor + 1)


@dataclass(frozen=True, eq=False)
class TimeGridFunction:
    """Node values on a :class:`TimeGrid`, linearly interpolated in between.

    ``values`` has shape ``(grid.count, *value_shape)``. ``lookahead_used`` is
    the amount of future output (in time units) consumed to produce the
    function; 0 means causal.

    ``cell_integrals`` optionally stores the exact integral over each of the
    ``count - 1`` cells. It is set when the represented function has structure
    finer than ``dt`` (a ramp shorter than one step); quadrature then uses it
    in place of the trapezoid value of that cell.
    """

    grid: TimeGrid
    values: np.ndarray
    lookahead_used: float = 0.0
    cell_integrals: Optional[np.ndarray] = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape[0] != self.grid.count:
            raise ValueError(
                f"values length {vals.shape[0]} does not match grid count {self.grid.count}"
            )
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        if self.cell_integrals is not None:
            cells = np.array(self.cell_integrals, dtype=float)
            if cells.shape != (self.grid.count - 1,) or vals.ndim != 1:
                raise ValueError("cell_integrals must be a scalar array of length count - 1")
            cells.setflags(write=False)
            object.__setattr__(self, "cell_integrals", cells)

    @classmethod
    def constant(cls, grid: TimeGrid, value, lookahead_used: float = 0.0) -> "TimeGridFunction":
        value = np.asarray(value, dtype=float)
        vals = np.broadcast_to(value, (grid.count,) + value.shape).copy()
        return cls(grid, vals, lookahead_used)

    @classmethod
    def from_callable(cls, grid: TimeGrid, fn: Callable, lookahead_used: float = 0.0):
        return cls(grid, np.array([fn(t) for t in grid.nodes], dtype=float), lookahead_used)

    @property
    def value_shape(self) -> tuple:
        return self.values.shape[1:]

    def __call__(self, t):
        if np.ndim(t) == 0:
            return self._eval_scalar(float(t))
        t = np.asarray(t, dtype=float)
        return np.stack([self._eval_scalar(float(s)) for s in t.ravel()]).reshape(
            t.shape + self.value_shape
        )

    def _eval_scalar(self, t: float):
        g = self.grid
        if not g.contains(t):
            raise GridDomainError(f"t={t} outside [{g.t_start}, {g.t_end}]")
        r = (t - g.t_start) / g.dt
        i = int(round(r))
        if abs(r - i) <= _SNAP:
            i = min(max(i, 0), g.count - 1)
            return self.values[i].copy() if self.value_shape else float(self.values[i])
        i = min(int(math.floor(r)), g.count - 2)
        w = r - i
        out = (1.0 - w) * self.values[i] + w * self.values[i + 1]
        return out if self.value_shape else float(out)

    def interp(self, t: np.ndarray) -> np.ndarray:
        """Vectorised linear interpolation (no snapping, no domain check)."""
        g = self.grid
        r = (np.asarray(t, dtype=float) - g.t_start) / g.dt
        i = np.clip(np.floor(r).astype(int), 0, g.count - 2)
        w = (r - i).reshape(r.shape + (1,) * len(self.value_shape))
        return (1.0 - w) * self.values[i] + w * self.values[i + 1]

    def cells(self) -> np.ndarray:
        """Integral over every cell: stored values or the trapezoid rule."""
        if self.cell_integrals is not None:
            return self.cell_integrals
        v = _scalar_values(self)
        return 0.5 * self.grid.dt * (v[1:] + v[:-1])

    def restrict(self, i0: int, i1: int) -> "TimeGridFunction":
        cells = None if self.cell_integrals is None else self.cell_integrals[i0:i1]
        return TimeGridFunction(
            self.grid.subgrid(i0, i1), self.values[i0 : i1 + 1], self.lookahead_used, cells
        )

    def with_values(self, values, lookahead_used: Optional[float] = None, cell_integrals=None) -> "TimeGridFunction":
        la = self.lookahead_used if lookahead_used is None else lookahead_used
        return TimeGridFunction(self.grid, values, la, cell_integrals)


@dataclass(frozen=True, eq=False)
class UnitSphereSample:
    """Deterministic, antipodally symmetric point set on the unit sphere.

    The first ``len(points)//2`` rows are representatives; the remaining rows
    are their negatives in the same order.
    """

    dimension: int
    points: np.ndarray
    level: int = field(default=1)

    @property
    def representatives(self) -> np.ndarray:
        return self.points[: len(self.points) // 2]


def integrate_ode(field: Callable, x0, grid: TimeGrid) -> TimeGridFunction:
    """Classical fixed-step RK4 on ``grid``; returns the state at every node."""
    x = np.array(x0, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    out = np.empty((grid.count,) + x.shape)
    out[0] = x
    dt = grid.dt
    h2 = 0.5 * dt
    for i in range(grid.count - 1):
        t = grid.t_start + i * dt
        k1 = np.asarray(field(t, x), dtype=float)
        k2 = np.asarray(field(t + h2, x + h2 * k1), dtype=float)
        k3 = np.asarray(field(t + h2, x + h2 * k2), dtype=float)
        k4 = np.asarray(field(t + dt, x + dt * k3), dtype=float)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise IntegrationBlowup(t + dt)
        out[i + 1] = x
    if scalar:
        out = out[:, 0]
    return TimeGridFunction(grid, out)


def _scalar_values(f: TimeGridFunction) -> np.ndarray:
    if f.value_shape:
        raise ValueError("expected a scalar-valued grid function")
    return f.values


def integrate_trapezoid(f: TimeGridFunction, a: float, b: float) -> float:
    """Composite trapezoid rule of ``f`` over ``[a, b]`` with partial end cells."""
    g = f.grid
    if a > b:
        raise ValueError(f"need a <= b, got a={a}, b={b}")
    if not (g.contains(a) and g.contains(b)):
        raise GridDomainError(f"[{a}, {b}] not inside [{g.t_start}, {g.t_end}]")
    vals = _scalar_values(f)
    a = min(max(a, g.t_start), g.t_end)
    b = min(max(b, g.t_start), g.t_end)
    ia = g.ceil_index(a)
    ib = g.floor_index(b)
    if ia > ib:  # both ends in the same cell
        fa, fb = f(a), f(b)
        return 0.5 * (fa + fb) * (b - a)
    total = 0.0
    ta = g.t_start + ia * g.dt
    if ta - a > _SNAP * g.dt:
        total += 0.5 * (f(a) + vals[ia]) * (ta - a)
    if ib > ia:
        total += f.cells()[ia:ib].sum()
    tb = g.t_start + ib * g.dt
    if b - tb > _SNAP * g.dt:
        total += 0.5 * (vals[ib] + f(b)) * (b - tb)
    return float(total)


def cumulative_trapezoid(f: TimeGridFunction, start_index: int = 0) -> np.ndarray:
    """Node values of ``t -> int_{t_start_index}^{t} f``; zero before ``start_index``."""
    _scalar_values(f)
    out = np.zeros(f.grid.count)
    if start_index < f.grid.count - 1:
        out[start_index + 1 :] = np.cumsum(f.cells()[start_index:])
    return out


def finite_difference(f: TimeGridFunction) -> TimeGridFunction:
    """Central differences in the interior, one-sided at the two end nodes."""
    v = f.values
    dt = f.grid.dt
    d = np.empty_like(v)
    d[1:-1] = (v[2:] - v[:-2]) / (2 * dt)
    d[0] = (v[1] - v[0]) / dt
    d[-1] = (v[-1] - v[-2]) / dt
    return TimeGridFunction(f.grid, d, f.lookahead_used)


def _half_width_nodes(half_window: float, dt: float) -> int:
    if half_window < 0:
        raise ValueError("half_window must be nonnegative")
    return int(math.floor(half_window / dt + _SNAP))


def windowed_max(values: np.ndarray, half_nodes: int) -> np.ndarray:
    """Max over ``[i-half_nodes, i+half_nodes]`` intersected with the grid."""
    if half_nodes == 0:
        return np.array(values, dtype=float)
    return maximum_filter1d(values, size=2 * half_nodes + 1, mode="nearest")


def windowed_min(values: np.ndarray, half_nodes: int) -> np.ndarray:
    if half_nodes == 0:
        return np.array(values, dtype=float)
    return minimum_filter1d(values, size=2 * half_nodes + 1, mode="nearest")


def smooth_upper_envelope(c: TimeGridFunction, margin: float, half_window: float) -> TimeGridFunction:
    """Smoothed function dominating the windowed maximum of ``c`` plus ``margin``."""
    if not margin > 0:
        raise ValueError(f"margin must be positive, got {margin}")
    vals = _scalar_values(c)
    if not np.all(np.isfinite(vals)):
        raise ValueError("envelope input must be finite")
    floor = windowed_max(vals, _half_width_nodes(half_window, c.grid.dt)) + margin
    phi = floor.copy()
    for _ in range(2):
        avg = phi.copy()
        avg[1:-1] = (phi[:-2] + phi[1:-1] + phi[2:]) / 3.0
        phi = np.maximum(avg, floor)
    phi = np.maximum(phi, margin)
    return TimeGridFunction(c.grid, phi, max(c.lookahead_used, half_window))


_GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


def _hemisphere_lattice(n: int, count: int) -> np.ndarray:
    if n == 3:
        i = np.arange(count)
        z = (i + 0.5) / count
        r = np.sqrt(1.0 - z * z)
        ang = i * _GOLDEN_ANGLE
        return np.column_stack([r * np.cos(ang), r * np.sin(ang), z])
    # generalised golden-ratio (Kronecker) lattice pushed through the normal
    # quantile map, then folded onto the half space x_n >= 0
    phi_d = 2.0
    for _ in range(64):
        phi_d = (1.0 + phi_d) ** (1.0 / (n + 1))
    alpha = (1.0 / phi_d) ** np.arange(1, n + 1)
    u = np.mod(0.5 + np.outer(np.arange(1, count + 1), alpha), 1.0)
    g = ndtri(np.clip(u, 1e-12, 1 - 1e-12))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    g[g[:, -1] < 0] *= -1.0
    return g


def unit_sphere_samples(n: int, level: int) -> UnitSphereSample:
    """Deterministic sample of the unit sphere in R^n (1 <= n <= 6).

    n=1 gives {+1, -1}; n=2 gives ``4*level`` equally spaced angles; n>=3
    gives a Fibonacci-type lattice of about ``level**2 * n / 2`` points with
    every signed basis vector included.
    """
    if not 1 <= n <= 6:
        raise ValueError(f"sphere dimension must be in 1..6, got {n}")
    if level < 1:
        raise ValueError(f"level must be a positive integer, got {level}")
    if n == 1:
        pts = np.array([[1.0], [-1.0]])
        return UnitSphereSample(1, pts, level)
    if n == 2:
        ang = 2.0 * math.pi * np.arange(2 * level) / (4 * level)
        reps = np.column_stack([np.cos(ang), np.sin(ang)])
        # exact basis vectors instead of cos(pi/2) ~ 6e-17
        reps[0] = (1.0, 0.0)
        reps[level] = (0.0, 1.0)
    else:
        half = max(1, (level * level * n) // 4)
        reps = np.vstack([_hemisphere_lattice(n, half), np.eye(n)])
        reps /= np.linalg.norm(reps, axis=1, keepdims=True)
    pts = np.vstack([reps, -reps])
    pts.setflags(write=False)
    return UnitSphereSample(n, pts, level)
