"""Plant models, output tapes with enforced access windows, built-in systems."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .numerics import TimeGrid, TimeGridFunction, integrate_ode

__all__ = [
    "AdmissibilityError",
    "CausalityViolation",
    "CausalityWindow",
    "CompositeStructure",
    "ForwardCompletenessViolation",
    "OutputTape",
    "PlantModel",
    "TriangularStructure",
    "BUILTIN_EXAMPLES",
    "builtin_example",
    "read_output",
    "simulate_plant",
]


class CausalityViolation(RuntimeError):
    """A tape read reached further into the future than the mode allows."""


class AdmissibilityError(ValueError):
    """Initial state outside the admissible set M."""


class ForwardCompletenessViolation(RuntimeError):
    """A simulated state exceeded its class-NNN bound beta."""


@dataclass(frozen=True)
class CausalityWindow:
    """Lookahead budget: ``tau0`` for certificates, ``tau`` in total.

    The degenerate window ``tau == tau0 == 0`` stands for causal operation.
    """

    tau0: float
    tau: float

    def __post_init__(self):
        if self.tau0 < 0:
            raise ValueError(f"tau0 must be nonnegative, got {self.tau0}")
        if not (self.tau > self.tau0 or (self.tau == 0 and self.tau0 == 0)):
            raise ValueError(f"need tau > tau0 >= 0, got tau0={self.tau0}, tau={self.tau}")

    @classmethod
    def causal(cls) -> "CausalityWindow":
        return cls(0.0, 0.0)

    @classmethod
    def noncausal(cls, tau: float) -> "CausalityWindow":
        return cls(tau / 2.0, tau)

    @property
    def is_causal(self) -> bool:
        return self.tau == 0.0

    @property
    def omega_half_width(self) -> float:
        return (self.tau - self.tau0) / 2.0

    @property
    def omega_lookahead(self) -> float:
        return self.tau0 + self.omega_half_width


class OutputTape:
    """Recorded output ``y`` with an audited read interface.

    Every read is logged as ``(t_now, s)``; reads with ``s > t_now`` (causal)
    or ``s > t_now + tau`` (noncausal) raise :class:`CausalityViolation`.
    """

    def __init__(self, y: TimeGridFunction, t0: float, mode: str = "causal", tau: float = 0.0):
        if mode not in ("causal", "noncausal"):
            raise ValueError(f"unknown tape mode {mode!r}")
        if mode == "noncausal" and not tau > 0:
            raise ValueError("noncausal tape needs tau > 0")
        self.y = y
        self.t0 = float(t0)
        self.mode = mode
        self.tau = 0.0 if mode == "causal" else float(tau)
        self._now: list = []
        self._s: list = []

    @property
    def allowance(self) -> float:
        return self.tau

    @property
    def k(self) -> int:
        return self.y.value_shape[0] if self.y.value_shape else 1

    def _check(self, t_now: np.ndarray, s: np.ndarray):
        tol = 1e-9 * self.y.grid.dt
        excess = s - t_now - self.tau
        bad = excess > tol
        if np.any(bad):
            j = int(np.argmax(bad))
            raise CausalityViolation(
                f"{self.mode} tape read y({s.flat[j]:.6g}) at t_now={t_now.flat[j]:.6g}"
                f" exceeds the allowed lookahead {self.tau:g}"
            )
        g = self.y.grid
        if np.any(s < g.t_start - tol) or np.any(s > g.t_end + tol):
            raise ValueError("tape read outside the recorded span")

    def read(self, t_now: float, s: float) -> np.ndarray:
        self._check(np.array([t_now]), np.array([s]))
        self._now.append(np.array([t_now], dtype=float))
        self._s.append(np.array([s], dtype=float))
        return np.atleast_1d(self.y(s))

    def read_many(self, t_now, s) -> np.ndarray:
        """Vectorised read: ``s`` values on or between grid nodes."""
        t_now = np.broadcast_to(np.asarray(t_now, dtype=float), np.shape(s)).ravel()
        s = np.asarray(s, dtype=float).ravel()
        self._check(t_now, s)
        self._now.append(t_now.copy())
        self._s.append(s.copy())
        g = self.y.grid
        r = (s - g.t_start) / g.dt
        near = np.rint(r)
        on_node = np.abs(r - near) <= 1e-9
        out = self.y.interp(s)
        if np.any(on_node):
            out[on_node] = self.y.values[near[on_node].astype(int)]
        return out.reshape(len(s), -1)

    def read_nodes(self, grid: TimeGrid, lookahead: float = 0.0) -> np.ndarray:
        """Read ``y`` at every node of ``grid``, each at ``t_now = node - lookahead``."""
        nodes = grid.nodes
        return self.read_many(nodes - lookahead, nodes)

    @property
    def access_log(self) -> list:
        if not self._now:
            return []
        now = np.concatenate(self._now)
        s = np.concatenate(self._s)
        return list(zip(now.tolist(), s.tolist()))

    def log_size(self) -> int:
        return int(sum(len(a) for a in self._now))

    def max_lookahead(self) -> float:
        """Largest ``s - t_now`` over the access log (``-inf`` when empty)."""
        if not self._now:
            return -math.inf
        return float(max(np.max(s - n) for n, s in zip(self._now, self._s)))

    def future_reads(self) -> int:
        tol = 1e-9 * self.y.grid.dt
        return int(sum(np.count_nonzero(s - n > tol) for n, s in zip(self._now, self._s)))


def read_output(tape: OutputTape, t_now: float, s: float) -> np.ndarray:
    return tape.read(t_now, s)


@dataclass(frozen=True)
class TriangularStructure:
    """Strict-feedback data: ``x_i' = f_i(t, x_1..x_i) + a_i(t, x_1) x_{i+1}``.

    ``a_funcs(t, y)`` returns the ``n-1`` coefficients; ``partial_bounds(t, r)``
    returns ``(lo, hi)`` n-by-n arrays bracketing ``df_i/dx_j`` over the ball of
    radius ``r`` in the ``(y, x_2, ..., x_n)`` variables.
    """

    a_funcs: Callable
    partial_bounds: Callable


@dataclass(frozen=True)
class CompositeStructure:
    """Composite data: ``x1' = f1 + a(t,x1) B(t,x1) x2``, ``x2' = f2(t,x1,x2)``.

    ``partial_bounds(t, r, y)`` brackets the Jacobian of ``f2`` in ``x2``;
    ``D0(t, y)`` is an optional q-independent part of the x2-block.
    """

    n1: int
    a: Callable
    B: Callable
    partial_bounds: Callable
    D0: Optional[Callable] = None


@dataclass(frozen=True)
class PlantModel:
    n: int
    k: int
    F: Callable  # (t, x, y) -> dx/dt
    H: Callable  # t -> k x n
    beta: Callable  # (t, t0, r) -> bound on |x(t)|
    in_M: Callable
    name: str
    jac: Optional[Callable] = None  # (t, x, y) -> dF/dx with y held fixed
    structure: Optional[object] = None
    params: dict = field(default_factory=dict)
    causal_capable: bool = False

    def f(self, t, x):
        x = np.asarray(x, dtype=float)
        return self.F(t, x, self.H(t) @ x)


def simulate_plant(plant: PlantModel, t0: float, x0, grid: TimeGrid, mode: str = "causal", tau: float = 0.0):
    """Integrate the plant from ``x0`` and record its output on a tape."""
    x0 = np.asarray(x0, dtype=float)
    if not plant.in_M(x0):
        raise AdmissibilityError(f"x0 = {x0.tolist()} is not in M for {plant.name}")
    if abs(grid.t_start - t0) > 1e-12:
        raise ValueError("grid must start at t0")
    traj = integrate_ode(plant.f, x0, grid)
    nodes = grid.nodes
    r0 = float(np.linalg.norm(x0))
    norms = np.linalg.norm(traj.values, axis=1)
    bounds = np.array([plant.beta(t, t0, r0) for t in nodes])
    bad = norms > bounds * (1 + 1e-6)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise ForwardCompletenessViolation(
            f"|x(t)| = {norms[i]:.6g} > beta = {bounds[i]:.6g} at t = {nodes[i]:.6g}"
        )
    y = np.einsum("tkn,tn->tk", np.array([plant.H(t) for t in nodes]), traj.values)
    tape = OutputTape(TimeGridFunction(grid, y), t0, mode, tau)
    return traj, tape


# ---------------------------------------------------------------------------
# built-in systems


def _ex3_1(params: dict) -> PlantModel:
    a_kind = params.get("a", "x1")
    if a_kind == "x1":
        a = lambda s: s
        da = lambda s: 1.0
        in_M = lambda x: x[0] != 0.0
    elif a_kind == "1":
        a = lambda s: 1.0
        da = lambda s: 0.0
        in_M = lambda x: True
    else:
        raise ValueError(f"ex3_1: unsupported a = {a_kind!r} (use 'x1' or '1')")

    def F(t, x, y):
        y1 = float(y[0])
        x2, x3 = float(x[1]), float(x[2])
        ay = a(y1)
        return np.array(
            [
                -y1 + ay * x2,
                -y1 * ay + x2 / (y1 * y1 + x2 * x2 + x3 * x3 + 1.0),
                -x3 / (y1 * y1 + x2 * x2 + 1.0),
            ]
        )

    def jac(t, x, y):
        y1 = float(y[0])
        x2, x3 = float(x[1]), float(x[2])
        N = y1 * y1 + x2 * x2 + x3 * x3 + 1.0
        N3 = y1 * y1 + x2 * x2 + 1.0
        return np.array(
            [
                [0.0, a(y1), 0.0],
                [0.0, (N - 2 * x2 * x2) / N**2, -2 * x2 * x3 / N**2],
                [0.0, 2 * x2 * x3 / N3**2, -1.0 / N3],
            ]
        )

    def beta(t, t0, r):
        return 2.0 * math.sqrt(max(t - t0, 0.0)) + math.sqrt(2.0) * r

    H0 = np.array([[1.0, 0.0, 0.0]])
    structure = CompositeStructure(
        n1=1,
        a=lambda t, y: a(float(y[0])),
        B=lambda t, y: np.array([[1.0, 0.0]]),
        partial_bounds=lambda t, r, y=None: ex3_1_block_bounds(r),
    )
    return PlantModel(
        n=3, k=1, F=F, H=lambda t: H0, beta=beta, in_M=in_M, name="ex3_1", jac=jac,
        structure=structure, params={"a": a_kind}, causal_capable=(a_kind == "1"),
    )


def ex3_1_block_bounds(r):
    """Brackets of the x2-block Jacobian of the ex3_1 plant over a ball.

    Entry (i, j) bounds ``d f2^i / d x_{j+1}`` on ``|(y, x2, x3)| <= r``.
    Works elementwise on arrays of radii; returns arrays of shape (..., 2, 2).
    """
    r = np.asarray(r, dtype=float)
    r2 = r * r
    lo = np.empty(r.shape + (2, 2))
    hi = np.empty(r.shape + (2, 2))
    # d/dx2 [x2/(1+|x|^2)] = (1 + v - u)/(1+u+v)^2 with u = x2^2, v = y^2 + x3^2
    hi[..., 0, 0] = 1.0
    lo[..., 0, 0] = np.where(r2 >= 3.0, -0.125, (1.0 - r2) / (1.0 + r2) ** 2)
    # d/dx3 [x2/(1+|x|^2)] = -2 x2 x3/(1+|x|^2)^2, |2 x2 x3| <= s := x2^2+x3^2
    m12 = np.where(r2 >= 1.0, 0.25, r2 / (1.0 + r2) ** 2)
    lo[..., 0, 1], hi[..., 0, 1] = -m12, m12
    # d/dx2 [-x3/(1+y^2+x2^2)] = 2 x2 x3/(1+y^2+x2^2)^2, worst case y = 0 and
    # x3^2 = r^2 - u; the stationary u solves 2u^2 - (3r^2+2)u + r^2 = 0
    b = 3.0 * r2 + 2.0
    u = (b - np.sqrt(b * b - 8.0 * r2)) / 4.0
    m21 = 2.0 * np.sqrt(u * np.maximum(r2 - u, 0.0)) / (1.0 + u) ** 2
    lo[..., 1, 0], hi[..., 1, 0] = -m21, m21
    # d/dx3 [-x3/(1+y^2+x2^2)] = -1/(1+y^2+x2^2)
    lo[..., 1, 1] = -1.0
    hi[..., 1, 1] = -1.0 / (1.0 + r2)
    return lo, hi


def sigma22_closed_form(t, R, xi):
    """Closed-form upper bracket ``-1/(16t + 8R^2 + xi + 1)`` for ``d f2^2/d x3``.

    It is a valid bracket over the mean-value region only while
    ``(beta + xi)^2 <= 16t + 8R^2 + xi``; the ball bracket returned by
    :func:`ex3_1_block_bounds` is the one used for boxes.
    """
    return -1.0 / (16.0 * t + 8.0 * R * R + xi + 1.0)


def _ex4_1(params: dict) -> PlantModel:
    xi1 = float(params.get("xi1", 1.0))
    xi2 = float(params.get("xi2", 1.0))
    C = float(params.get("C", 0.0))
    a_kind = params.get("a", "1+x1^2")
    if xi1 < 0 or xi2 < 0:
        raise ValueError(f"ex4_1 needs xi1, xi2 >= 0, got xi1={xi1}, xi2={xi2}")
    if C < 0:
        raise ValueError(f"ex4_1 needs C >= 0, got {C}")
    if a_kind == "1+x1^2":
        a = lambda t, s: 1.0 + s * s
    elif a_kind == "x1":
        a = lambda t, s: s
    elif a_kind == "1":
        a = lambda t, s: 1.0
    else:
        raise ValueError(f"ex4_1: unsupported a = {a_kind!r}")
    bounded = a_kind == "1"
    if not bounded and (C != 0.0 or xi1 == 0.0 or xi2 == 0.0):
        raise ValueError("ex4_1 with unbounded a needs C = 0 and xi1, xi2 > 0")

    def F(t, x, y):
        y1 = float(y[0])
        x2, x3 = float(x[1]), float(x[2])
        return np.array(
            [
                x2,
                a(t, y1) * x3 + C * y1 * math.cos(t) - xi1 * x2**3,
                C * y1 * math.sin(t) - xi2 * x3**3,
            ]
        )

    def jac(t, x, y):
        y1 = float(y[0])
        x2, x3 = float(x[1]), float(x[2])
        return np.array(
            [[0.0, 1.0, 0.0], [0.0, -3 * xi1 * x2 * x2, a(t, y1)], [0.0, 0.0, -3 * xi2 * x3 * x3]]
        )

    if bounded:
        # V = |x|^2: V'/2 <= (1+C)|x1 x2| + |x2 x3| + C|x1 x3| <= kappa V
        kappa = max(1.0 + 2 * C, 2.0 + C, 1.0 + C) / 2.0
        ell = 2.0 * kappa

        def beta(t, t0, r):
            return r * math.exp(ell * max(t - t0, 0.0) / 2.0)
    else:
        ell = None

        def beta(t, t0, r):
            return ex4_1_polynomial_beta(t - t0, r, xi1)

    def partial_bounds(t, r):
        r = np.asarray(r, dtype=float)
        lo = np.zeros(r.shape + (3, 3))
        hi = np.zeros(r.shape + (3, 3))
        lo[..., 1, 1] = -3.0 * xi1 * r * r
        lo[..., 2, 2] = -3.0 * xi2 * r * r
        return lo, hi

    structure = TriangularStructure(
        a_funcs=lambda t, y: np.array([1.0, a(t, float(y[0]))]),
        partial_bounds=partial_bounds,
    )
    if a_kind == "x1":
        in_M = lambda x: bool(x[0] != 0.0 or x[1] != 0.0)
    else:
        in_M = lambda x: True
    H0 = np.array([[1.0, 0.0, 0.0]])
    return PlantModel(
        n=3, k=1, F=F, H=lambda t: H0, beta=beta, in_M=in_M, name="ex4_1", jac=jac,
        structure=structure,
        params={"xi1": xi1, "xi2": xi2, "C": C, "a": a_kind, "ell": ell},
        causal_capable=(a_kind != "x1"),
    )


def ex4_1_polynomial_beta(s: float, r: float, xi1: float) -> float:
    """Comparison bound for the ex4_1 plant with ``|a| <= 1 + x1^2`` and ``g = 0``.

    ``|x3|`` never grows, ``|x2| <= max(r, ((1+X^2) r / xi1)^(1/3))`` while
    ``|x1| <= X`` and ``X' <= K (1+X)^(2/3)`` integrates in closed form.
    """
    s = max(s, 0.0)
    c = (r / xi1) ** (1.0 / 3.0)
    K = max(r / (1.0 + r) ** (2.0 / 3.0), c)
    X = ((1.0 + r) ** (1.0 / 3.0) + K * s / 3.0) ** 3 - 1.0
    W = max(r, c * (1.0 + X * X) ** (1.0 / 3.0))
    return math.sqrt(X * X + W * W + r * r)


def _composite_linear(name: str, params: dict, Bbar, B, f_gain: float, a0: float, abar: float, beta_gain: float):
    Bbar = np.atleast_2d(np.asarray(Bbar, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n2 = Bbar.shape[0]
    n1 = B.shape[0]
    if Bbar.shape != (n2, n2) or B.shape[1] != n2:
        raise ValueError("inconsistent B, Bbar shapes")
    if n1 != 1:
        raise ValueError("only scalar outputs (n1 = 1) are supported")
    if abar <= 0:
        raise ValueError("abar must be positive")
    n = n1 + n2
    J = np.zeros((n, n))
    J[:n1, n1:] = a0 * B
    J[n1:, n1:] = abar * Bbar
    J[:n1, :n1] = -f_gain * np.eye(n1)

    def F(t, x, y):
        x = np.asarray(x, dtype=float)
        out = J[:, n1:] @ x[n1:]
        out[:n1] += -f_gain * np.asarray(y, dtype=float)
        return out

    def jac(t, x, y):
        Jx = J.copy()
        Jx[:, :n1] = 0.0
        return Jx

    Dfix = abar * Bbar
    structure = CompositeStructure(
        n1=n1,
        a=lambda t, y: a0,
        B=lambda t, y: B,
        partial_bounds=lambda t, r, y=None: (
            np.broadcast_to(Dfix, np.shape(r) + Dfix.shape).copy(),
            np.broadcast_to(Dfix, np.shape(r) + Dfix.shape).copy(),
        ),
    )
    H0 = np.zeros((n1, n))
    H0[:, :n1] = np.eye(n1)
    return PlantModel(
        n=n, k=n1, F=F, H=lambda t: H0, beta=lambda t, t0, r: beta_gain * r,
        in_M=lambda x: True, name=name, jac=jac, structure=structure,
        params=params, causal_capable=(a0 != 0.0),
    )


def _ex3_2(params: dict) -> PlantModel:
    if "beta_gain" not in params:
        raise ValueError("ex3_2 needs a user-supplied bound: set params.beta_gain")
    Bbar = params.get("Bbar", [[0.0, 1.0], [-1.0, 0.0]])
    B = params.get("B", [[1.0, 0.0]])
    return _composite_linear(
        "ex3_2", dict(params), Bbar, B,
        f_gain=float(params.get("f_gain", 1.0)),
        a0=float(params.get("a", 1.0)),
        abar=float(params.get("abar", 1.0)),
        beta_gain=float(params["beta_gain"]),
    )


def _linear_detectable(params: dict) -> PlantModel:
    # x1' = x2_1, x2' = -x2: |x2(t)| <= |x2(0)| and |x1(t)| <= |x1(0)| + |x2(0)|
    return _composite_linear(
        "linear_detectable", dict(params), -np.eye(2), [[1.0, 0.0]],
        f_gain=0.0, a0=1.0, abar=1.0, beta_gain=math.sqrt(5.0),
    )


BUILTIN_EXAMPLES = {
    "ex3_1": (_ex3_1, "composite 3-state plant, y = x1, a(x1) = x1 by default"),
    "ex3_2": (_ex3_2, "composite linear-block plant with detectable (Bbar, B); needs beta_gain"),
    "ex4_1": (_ex4_1, "strict-feedback 3-state plant, a(t, x1) = 1 + x1^2 by default"),
    "linear_detectable": (_linear_detectable, "x1' = x2_1, x2' = -x2 sanity system"),
}


def builtin_example(name: str, params: Optional[dict] = None) -> PlantModel:
    try:
        factory = BUILTIN_EXAMPLES[name][0]
    except KeyError:
        raise ValueError(f"unknown example {name!r}; known: {sorted(BUILTIN_EXAMPLES)}") from None
    return factory(dict(params or {}))
