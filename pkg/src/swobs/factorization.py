"""Interval boxes of factorization parameters and the affine templates they feed.

A template ``A(t, q, y) = base(t, y) + sum_j q_j E_{r_j c_j}`` is affine in the
parameter vector ``q``; a :class:`BoxValuedMap` gives, at every grid node, a
closed box the parameters range over. Because every quantity the certificates
and gains need is affine in ``q``, suprema over a box are attained at its
vertices.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .model import CompositeStructure, PlantModel, TriangularStructure
from .numerics import TimeGrid, TimeGridFunction

__all__ = [
    "FactorizationInvalid",
    "BoxValuedMap",
    "FactorizationTemplate",
    "MeanValueReport",
    "triangular_template",
    "composite_template",
    "block_template",
    "triangular_box",
    "composite_box",
    "numeric_partial_bounds",
    "box_vertices",
    "vertex_sup",
    "mean_value_check",
]

SLACK = 1e-9


class FactorizationInvalid(AssertionError):
    """A recovered mean-value parameter fell outside its box."""


@dataclass(frozen=True, eq=False)
class BoxValuedMap:
    """``t -> [lower(t), upper(t)]`` as a pair of vector-valued grid functions."""

    lower: TimeGridFunction
    upper: TimeGridFunction
    rigorous: bool = True

    def __post_init__(self):
        if self.lower.values.shape != self.upper.values.shape:
            raise ValueError("lower and upper bounds must have the same shape")
        if self.lower.values.ndim != 2:
            raise ValueError("box bounds must be vector valued")
        if np.any(self.lower.values > self.upper.values):
            raise ValueError("box lower bound exceeds upper bound")

    @property
    def dim(self) -> int:
        return self.lower.values.shape[1]

    @property
    def grid(self) -> TimeGrid:
        return self.lower.grid

    @property
    def active(self) -> np.ndarray:
        """Coordinates that are non-degenerate somewhere on the grid."""
        return np.any(self.upper.values > self.lower.values, axis=0)

    def at(self, t: float):
        return self.lower(t), self.upper(t)

    def contains(self, t: float, q, slack: float = SLACK) -> bool:
        lo, hi = self.at(t)
        q = np.asarray(q, dtype=float)
        return bool(np.all(q >= lo - slack) and np.all(q <= hi + slack))

    def restrict(self, i0: int, i1: int) -> "BoxValuedMap":
        return BoxValuedMap(self.lower.restrict(i0, i1), self.upper.restrict(i0, i1), self.rigorous)

    def select(self, coords: Sequence[int]) -> "BoxValuedMap":
        coords = list(coords)
        lo, hi = self.lower, self.upper
        return BoxValuedMap(
            lo.with_values(lo.values[:, coords]), hi.with_values(hi.values[:, coords]), self.rigorous
        )


@dataclass(frozen=True, eq=False)
class FactorizationTemplate:
    """Affine matrix family ``base(t, y) + sum_j q_j E_{positions[j]}``."""

    structure: str
    n: int
    positions: tuple
    base: Callable  # (t, y) -> n x n
    a_funcs: Optional[Callable] = None
    labels: tuple = ()

    @property
    def dim(self) -> int:
        return len(self.positions)

    @property
    def rows(self) -> np.ndarray:
        return np.array([p[0] for p in self.positions], dtype=np.intp)

    @property
    def cols(self) -> np.ndarray:
        return np.array([p[1] for p in self.positions], dtype=np.intp)

    def assemble(self, t: float, q, y) -> np.ndarray:
        A = np.array(self.base(t, y), dtype=float).reshape(self.n, self.n)
        q = np.asarray(q, dtype=float)
        for (r, c), v in zip(self.positions, q):
            A[r, c] += v
        return A

    def assemble_many(self, base: np.ndarray, q: np.ndarray) -> np.ndarray:
        """Vectorised assembly from precomputed ``base`` of shape (..., n, n)."""
        A = np.array(base, dtype=float)
        q = np.asarray(q, dtype=float)
        for j, (r, c) in enumerate(self.positions):
            A[..., r, c] += q[..., j]
        return A

    def base_on(self, nodes: np.ndarray, ys: np.ndarray) -> np.ndarray:
        return np.array([self.base(t, y) for t, y in zip(nodes, ys)], dtype=float).reshape(
            len(nodes), self.n, self.n
        )

    def block(self, first: int) -> "FactorizationTemplate":
        """Lower-right block starting at row/column ``first`` (used by the chain)."""
        keep = [j for j, (r, c) in enumerate(self.positions) if r >= first and c >= first]
        positions = tuple((self.positions[j][0] - first, self.positions[j][1] - first) for j in keep)
        labels = tuple(self.labels[j] for j in keep) if self.labels else ()
        parent = self.base

        def base(t, y):
            return np.asarray(parent(t, y), dtype=float)[first:, first:]

        return FactorizationTemplate(self.structure, self.n - first, positions, base, self.a_funcs, labels)

    def block_coords(self, first: int) -> list:
        return [j for j, (r, c) in enumerate(self.positions) if r >= first and c >= first]


def triangular_template(plant: PlantModel) -> FactorizationTemplate:
    st = plant.structure
    if not isinstance(st, TriangularStructure):
        raise TypeError(f"{plant.name} does not have triangular structure")
    n = plant.n
    positions = tuple((i, j) for i in range(n) for j in range(i + 1))
    labels = tuple(f"q{i + 1}{j + 1}" for i, j in positions)

    def base(t, y):
        A = np.zeros((n, n))
        a = np.asarray(st.a_funcs(t, y), dtype=float)
        A[np.arange(n - 1), np.arange(1, n)] = a
        return A

    return FactorizationTemplate("triangular", n, positions, base, st.a_funcs, labels)


def composite_template(plant: PlantModel) -> FactorizationTemplate:
    """Full-state template ``[[0, a B], [0, D0 + D(q)]]``."""
    st = plant.structure
    if not isinstance(st, CompositeStructure):
        raise TypeError(f"{plant.name} does not have composite structure")
    n, n1 = plant.n, st.n1
    n2 = n - n1
    positions = tuple((n1 + i, n1 + j) for i in range(n2) for j in range(n2))
    labels = tuple(f"q{k + 1}" for k in range(n2 * n2))

    def base(t, y):
        A = np.zeros((n, n))
        A[:n1, n1:] = st.a(t, y) * np.asarray(st.B(t, y), dtype=float)
        if st.D0 is not None:
            A[n1:, n1:] = st.D0(t, y)
        return A

    return FactorizationTemplate("composite", n, positions, base, st.a, labels)


def block_template(plant: PlantModel) -> FactorizationTemplate:
    """The x2-block ``D(t, q, y)`` of a composite plant."""
    st = plant.structure
    if not isinstance(st, CompositeStructure):
        raise TypeError(f"{plant.name} does not have composite structure")
    n2 = plant.n - st.n1
    positions = tuple((i, j) for i in range(n2) for j in range(n2))
    labels = tuple(f"q{k + 1}" for k in range(n2 * n2))

    def base(t, y):
        if st.D0 is None:
            return np.zeros((n2, n2))
        return np.asarray(st.D0(t, y), dtype=float)

    return FactorizationTemplate("dense", n2, positions, base, None, labels)


def _radii(plant: PlantModel, R: float, t0: float, xi: float, grid: TimeGrid) -> np.ndarray:
    return np.array([2.0 * plant.beta(t, t0, R) + xi for t in grid.nodes])


def triangular_box(plant: PlantModel, R: float, t0: float, xi: float, grid: TimeGrid,
                   partial_bounds: Optional[Callable] = None) -> BoxValuedMap:
    """Box for ``q_{i,j}, j <= i`` from brackets of ``df_i/dx_j`` on the radius-``2 beta + xi`` ball."""
    st = plant.structure
    if not isinstance(st, TriangularStructure):
        raise TypeError(f"{plant.name} does not have triangular structure")
    pb = partial_bounds or st.partial_bounds
    n = plant.n
    lo3, hi3 = pb(grid.nodes, _radii(plant, R, t0, xi, grid))
    rows, cols = np.tril_indices(n)
    lo = np.array(lo3[:, rows, cols])
    hi = np.array(hi3[:, rows, cols])
    pinned = cols == 0
    lo[:, pinned] = 0.0
    hi[:, pinned] = 0.0
    return BoxValuedMap(TimeGridFunction(grid, lo), TimeGridFunction(grid, hi))


def composite_box(plant: PlantModel, R: float, t0: float, xi: float, grid: TimeGrid,
                  partial_bounds: Optional[Callable] = None) -> BoxValuedMap:
    """Box for the entries of the x2-block Jacobian, stored row-major."""
    st = plant.structure
    if not isinstance(st, CompositeStructure):
        raise TypeError(f"{plant.name} does not have composite structure")
    pb = partial_bounds or st.partial_bounds
    n2 = plant.n - st.n1
    lo3, hi3 = pb(grid.nodes, _radii(plant, R, t0, xi, grid))
    lo = np.array(lo3).reshape(grid.count, n2 * n2)
    hi = np.array(hi3).reshape(grid.count, n2 * n2)
    return BoxValuedMap(TimeGridFunction(grid, lo), TimeGridFunction(grid, hi))


def numeric_partial_bounds(plant: PlantModel, template: FactorizationTemplate, r: float,
                           t: float = 0.0, samples: int = 2000, inflation: float = 0.1,
                           seed: int = 0):
    """Sampled Jacobian brackets on the radius-``r`` ball, widened by ``inflation``.

    Not a rigorous enclosure: boxes built from it carry ``rigorous=False``.
    Returns ``(lo, hi)`` over the template's q-coordinates.
    """
    if plant.jac is None:
        raise ValueError(f"{plant.name} provides no Jacobian")
    rng = np.random.default_rng(seed)
    n = plant.n
    g = rng.standard_normal((samples, n))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    pts = g * (r * rng.random((samples, 1)) ** (1.0 / n))
    # include the boundary and the centre, where the extremes of smooth maps often sit
    pts = np.vstack([pts, g * r, np.zeros((1, n))])
    rows, cols = template.rows, template.cols
    offset = n - template.n
    vals = np.array([plant.jac(t, p, p[:1])[rows + offset, cols + offset] for p in pts])
    lo, hi = vals.min(axis=0), vals.max(axis=0)
    pad = inflation * np.maximum(hi - lo, np.maximum(np.abs(lo), np.abs(hi)))
    return lo - pad, hi + pad


def box_vertices(lo, hi) -> np.ndarray:
    """All vertices in lexicographic order; degenerate coordinates appear once."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    choices = [(l,) if l == h else (l, h) for l, h in zip(lo, hi)]
    return np.array(list(itertools.product(*choices)), dtype=float).reshape(-1, len(lo))


def vertex_sup(fn: Callable, lo, hi):
    """Maximum of ``fn`` over the box vertices and the first maximising vertex."""
    verts = box_vertices(lo, hi)
    vals = np.array([fn(v) for v in verts])
    k = int(np.argmax(vals))
    return float(vals[k]), verts[k]


@dataclass
class MeanValueReport:
    trials: int
    violations: int
    max_violation: float
    max_residual: float
    rigorous: bool
    witness: Optional[dict] = None
    slack: float = SLACK

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def as_dict(self) -> dict:
        return {
            "trials": self.trials,
            "violations": self.violations,
            "max_violation": self.max_violation,
            "max_residual": self.max_residual,
            "rigorous": self.rigorous,
            "slack": self.slack,
            "witness": self.witness,
        }


def _mean_value_point(h: Callable, pieces: int = 64, tol: float = 1e-12) -> float:
    grid = np.linspace(0.0, 1.0, pieces + 1)
    vals = np.array([h(s) for s in grid])
    brackets = [k for k in range(pieces) if vals[k] == 0.0 or vals[k] * vals[k + 1] < 0.0]
    if vals[-1] == 0.0:
        brackets.append(pieces)
    if not brackets:
        return float(grid[np.argmin(np.abs(vals))])
    mid = lambda k: abs(0.5 * (grid[k] + grid[min(k + 1, pieces)]) - 0.5)
    k = min(brackets, key=mid)
    if k == pieces or vals[k] == 0.0:
        return float(grid[k])
    a, b, fa = grid[k], grid[k + 1], vals[k]
    while b - a > tol:
        m = 0.5 * (a + b)
        fm = h(m)
        if fm == 0.0:
            return float(m)
        if (fm < 0) == (fa < 0):
            a, fa = m, fm
        else:
            b = m
    return float(0.5 * (a + b))


def _ball(rng, n: int, radius: float) -> np.ndarray:
    g = rng.standard_normal(n)
    g /= np.linalg.norm(g)
    return g * radius * rng.random() ** (1.0 / n)


def mean_value_check(plant: PlantModel, template: FactorizationTemplate, box: BoxValuedMap,
                     trials: int, xi: float, R: float, t0: float = 0.0, seed: int = 0,
                     raise_on_violation: bool = True, pairs: Optional[Sequence] = None) -> MeanValueReport:
    """Recover mean-value parameters row by row and check they lie in ``box``.

    ``pairs`` may supply explicit ``(t, x, z)`` triples; otherwise ``trials``
    random ones are drawn with ``|x| <= beta(t, t0, R)`` and ``|x - z| <= xi``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if plant.jac is None:
        raise ValueError(f"{plant.name} provides no Jacobian")
    rng = np.random.default_rng(seed)
    n = plant.n
    offset = n - template.n
    rows, cols = template.rows, template.cols
    g = box.grid
    if pairs is None:
        pairs = []
        for _ in range(trials):
            t = g.t_start + (g.t_end - g.t_start) * rng.random()
            x = _ball(rng, n, plant.beta(t, t0, R))
            z = x + _ball(rng, n, xi)
            pairs.append((t, x, z))
    worst, worst_res, count, witness = 0.0, 0.0, 0, None
    for t, x, z in pairs:
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=float)
        y = plant.H(t) @ x
        dx = x - z
        dF = plant.F(t, x, y) - plant.F(t, z, y)
        q = np.zeros(template.dim)
        if np.any(dx != 0.0):
            for i in range(offset, n):
                mine = np.nonzero(rows + offset == i)[0]
                if len(mine) == 0:
                    continue
                grad = lambda s, i=i: plant.jac(t, z + s * dx, y)[i]
                h = lambda s, i=i: float(grad(s) @ dx) - dF[i]
                s_star = _mean_value_point(h)
                q[mine] = grad(s_star)[cols[mine] + offset]
        A = np.zeros((n, n))
        A[offset:, offset:] = template.assemble(t, q, y)
        if offset:
            A[:offset] = plant.jac(t, z, y)[:offset]
        res = float(np.max(np.abs(A @ dx - dF))) if n else 0.0
        worst_res = max(worst_res, res)
        lo, hi = box.at(t)
        excess = np.maximum(lo - q, q - hi)
        # x = z: every q factors the zero increment, so nothing to check
        v = float(np.max(excess)) if len(q) and np.any(dx != 0.0) else -math.inf
        if v > SLACK:
            count += 1
        if v > worst or witness is None:
            worst = max(worst, v)
            witness = {"t": float(t), "x": x.tolist(), "z": z.tolist(), "q": q.tolist(),
                       "lower": np.asarray(lo).tolist(), "upper": np.asarray(hi).tolist()}
    report = MeanValueReport(len(pairs), count, max(worst, 0.0), worst_res, box.rigorous, witness)
    if count and raise_on_violation:
        raise FactorizationInvalid(
            f"{count} of {len(pairs)} recovered parameters left the box "
            f"(max excess {worst:.3e}) at {witness}"
        )
    return report
