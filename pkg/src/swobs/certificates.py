"""Time-varying Lyapunov certificates and the constructions that produce them.

A certificate is a symmetric ``P(t) >= I`` with rate ``d(t)`` such that along
the kernel of the output map the dissipation form
``e' P A e + 1/2 e' Pdot e + d e' P e`` is nonpositive for every box
parameter. The composite lift borders a block certificate with
``S = -l a B`` and a diagonal completion ``T``; the triangular chain applies
the lift repeatedly from the last state upwards.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import null_space, solve_continuous_lyapunov

from .factorization import BoxValuedMap, FactorizationTemplate, triangular_box, triangular_template
from .kernels import dissipation_scan
from .model import CausalityWindow, OutputTape, PlantModel, TriangularStructure
from .numerics import (
    TimeGrid,
    TimeGridFunction,
    cumulative_trapezoid,
    finite_difference,
    unit_sphere_samples,
)

__all__ = [
    "CertificateError",
    "ScheduleInfeasible",
    "LiftFailed",
    "Certificate",
    "LiftedCertificate",
    "GateReport",
    "FactISchedule",
    "CausalSchedule",
    "psd_margin",
    "constant_certificate",
    "detectability_certificate",
    "fact_I_schedule",
    "causal_schedule",
    "fact_II_completion",
    "kernel_inequality_check",
    "lift_composite",
    "triangular_chain",
    "certificate_to_json",
    "certificate_from_json",
]

PSD_TOL = 1e-9
NORM_TOL = 1e-9
KERNEL_SLACK = 1e-7
DEFAULT_GROWTH_FLOOR = 3.0
SCHUR_EXCESS = 1e-10
# above this norm the absolute eigenvalue test is below float64 resolution
_SCALED_PSD_NORM = 1e6


class CertificateError(ValueError):
    """A certificate precondition or gate failed."""


class ScheduleInfeasible(CertificateError):
    """No schedule meets the budget at the grid's resolution floor."""


class LiftFailed(CertificateError):
    """A lift stage produced a matrix violating one of its inequalities."""

    def __init__(self, message: str, inequality: str = "", witness: Optional[dict] = None, stage=None):
        self.inequality = inequality
        self.witness = witness or {}
        self.stage = stage
        super().__init__(message)


def _sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def psd_margin(M: np.ndarray):
    """Smallest eigenvalue of each symmetric matrix in ``M`` and the route used.

    For matrices whose norm exceeds ``1e6`` the absolute eigenvalue carries
    roundoff far above the gate tolerance; there the test is repeated on the
    diagonally scaled matrix ``D^-1/2 M D^-1/2`` (same inertia, unit diagonal)
    and the node passes if either route does.
    """
    M = np.asarray(M, dtype=float)
    lam = np.linalg.eigvalsh(_sym(M))[..., 0]
    route = np.zeros(lam.shape, dtype=bool)
    big = np.linalg.norm(M, ord=2, axis=(-2, -1)) > _SCALED_PSD_NORM
    need = big & (lam < -PSD_TOL)
    if np.any(need):
        sub = M[need]
        dg = np.diagonal(sub, axis1=-2, axis2=-1)
        ok = np.all(dg > 0, axis=-1)
        scale = 1.0 / np.sqrt(np.where(dg > 0, dg, 1.0))
        scaled = sub * scale[..., :, None] * scale[..., None, :]
        lam_s = np.linalg.eigvalsh(_sym(scaled))[..., 0]
        lam_s = np.where(ok, lam_s, -np.inf)
        better = lam_s >= -PSD_TOL
        vals = lam[need]
        vals[better] = lam_s[better]
        lam[need] = vals
        r = route[need]
        r[better] = True
        route[need] = r
    return lam, route


@dataclass
class GateReport:
    checks: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks.values() if c.get("fatal", True))

    def failures(self) -> list:
        return [k for k, c in self.checks.items() if not c["passed"]]

    def as_dict(self) -> dict:
        return {"passed": self.passed, "checks": self.checks}


@dataclass(frozen=True, eq=False)
class Certificate:
    """``(P, Pdot, d)`` on a grid starting at the certificate's initial time."""

    P: TimeGridFunction
    Pdot: TimeGridFunction
    d: TimeGridFunction
    L: float
    eps: float
    causality: str = "causal"
    tau0: float = 0.0
    provenance: tuple = ()
    growth_floor: float = DEFAULT_GROWTH_FLOOR

    def __post_init__(self):
        if self.causality not in ("causal", "noncausal"):
            raise ValueError(f"unknown causality {self.causality!r}")
        if self.P.values.ndim != 3 or self.P.values.shape[1] != self.P.values.shape[2]:
            raise ValueError("P must be a square-matrix valued grid function")
        if self.Pdot.values.shape != self.P.values.shape:
            raise ValueError("Pdot must match P")
        if self.d.value_shape:
            raise ValueError("d must be scalar valued")

    @property
    def dim(self) -> int:
        return self.P.values.shape[1]

    @property
    def grid(self) -> TimeGrid:
        return self.P.grid

    @property
    def t_bar0(self) -> float:
        return self.grid.t_start

    @property
    def lookahead_used(self) -> float:
        return max(self.P.lookahead_used, self.Pdot.lookahead_used, self.d.lookahead_used)

    def d_integral(self) -> np.ndarray:
        return cumulative_trapezoid(self.d)

    def gates(self) -> GateReport:
        rep = GateReport()
        P = self.P.values
        lam, scaled = psd_margin(P - np.eye(self.dim))
        i = int(np.argmin(lam))
        rep.checks["psd"] = {
            "passed": bool(lam[i] >= -PSD_TOL),
            "min_eig": float(lam[i]),
            "t": float(self.grid.nodes[i]),
            "scaled_nodes": int(np.count_nonzero(scaled)),
        }
        nrm = float(np.linalg.norm(P[0], ord=2))
        rep.checks["initial_norm"] = {"passed": bool(nrm <= self.L + NORM_TOL), "norm": nrm, "L": self.L}
        rep.checks["L_exceeds_one"] = {"passed": bool(self.L > 1.0), "L": self.L}
        cum = self.d_integral()
        j = int(np.argmin(cum))
        rep.checks["budget"] = {
            "passed": bool(cum[j] > -self.eps),
            "min_integral": float(cum[j]),
            "t": float(self.grid.nodes[j]),
            "eps": self.eps,
        }
        rep.checks["divergence_proxy"] = {
            "passed": bool(cum[-1] >= self.growth_floor),
            "integral": float(cum[-1]),
            "floor": self.growth_floor,
            "fatal": False,
        }
        return rep

    def assert_gates(self) -> GateReport:
        rep = self.gates()
        if not rep.passed:
            bad = {k: rep.checks[k] for k in rep.failures() if rep.checks[k].get("fatal", True)}
            raise CertificateError(f"certificate gate failed: {bad}")
        return rep


@dataclass(frozen=True, eq=False)
class LiftedCertificate:
    base: Certificate
    S: TimeGridFunction
    T: TimeGridFunction
    ell: TimeGridFunction
    h: TimeGridFunction
    dbar: TimeGridFunction
    full: Certificate
    phi: TimeGridFunction
    report: dict = field(default_factory=dict)

    def as_certificate(self) -> Certificate:
        return self.full


# ---------------------------------------------------------------------------
# constant and detectability certificates


def constant_certificate(P0, d: TimeGridFunction, L: float, eps: float, causality: str = "causal",
                         tau0: float = 0.0, growth_floor: float = DEFAULT_GROWTH_FLOOR,
                         provenance: str = "constant") -> Certificate:
    P0 = np.atleast_2d(np.asarray(P0, dtype=float))
    if P0.shape[0] != P0.shape[1] or not np.allclose(P0, P0.T, rtol=0, atol=1e-12):
        raise CertificateError("P0 must be a symmetric square matrix")
    if not L > 1.0:
        raise CertificateError(f"L must exceed 1, got {L}")
    if not eps > 0:
        raise CertificateError(f"eps must be positive, got {eps}")
    lam = float(np.linalg.eigvalsh(P0 - np.eye(len(P0)))[0])
    if lam < -PSD_TOL:
        raise CertificateError(f"P0 - I has eigenvalue {lam:.3e} < 0")
    nrm = float(np.linalg.norm(P0, ord=2))
    if nrm > L + NORM_TOL:
        raise CertificateError(f"|P0| = {nrm:.6g} exceeds L = {L:.6g}")
    grid = d.grid
    P = TimeGridFunction.constant(grid, P0, d.lookahead_used)
    Pdot = TimeGridFunction.constant(grid, np.zeros_like(P0), d.lookahead_used)
    return Certificate(P, Pdot, d, float(L), float(eps), causality, tau0,
                       ({"stage": provenance, "L": float(L), "eps": float(eps)},), growth_floor)


def _kernel_rate(K: np.ndarray, P: np.ndarray, Bbar: np.ndarray) -> float:
    """Largest ``c`` with ``sym(K'P Bbar K) + c K'PK <= 0``."""
    KPK = K.T @ P @ K
    M = _sym(K.T @ P @ Bbar @ K)
    w, V = np.linalg.eigh(KPK)
    if w[0] <= 0:
        return -math.inf
    R = V @ np.diag(w ** -0.5) @ V.T
    return float(np.linalg.eigvalsh(-R @ M @ R)[0])


def detectability_certificate(Bbar, B, S=None, levels: int = 6):
    """Constant ``P > I`` and ``c > 0`` with ``e' P Bbar e <= -c e'P e`` on ``ker B``.

    ``P`` is searched as ``alpha (S + gamma B'B)``. On the kernel ``B'B``
    vanishes, so the attainable rate depends on ``S`` only; the grid search
    picks the smallest feasible ``alpha`` and returns the largest ``c``.
    """
    Bbar = np.atleast_2d(np.asarray(Bbar, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n2 = Bbar.shape[0]
    K = null_space(B)
    if S is None:
        if np.linalg.eigvalsh(_sym(Bbar))[-1] <= 1e-12:
            S = np.eye(n2)
        elif np.all(np.linalg.eigvals(Bbar).real < 0):
            S = solve_continuous_lyapunov(Bbar.T, -np.eye(n2))
        else:
            S = np.eye(n2)
    S = np.asarray(S, dtype=float)
    smin = float(np.linalg.eigvalsh(S)[0])
    if smin <= 0:
        raise CertificateError("S must be positive definite")
    best = None
    for k in range(1, levels + 1):
        alpha = 2.0 ** k / smin
        for gamma in (0.0, 0.1, 1.0, 10.0):
            P = alpha * (S + gamma * B.T @ B)
            if np.linalg.eigvalsh(P - np.eye(n2))[0] <= 0:
                continue
            c = _kernel_rate(K, P, Bbar) if K.size else math.inf
            if not c > 1e-12:
                continue
            if math.isinf(c):
                c = 1.0
            chk = K.T @ P @ Bbar @ K
            top = np.linalg.eigvalsh(_sym(chk) + c * K.T @ P @ K)[-1] if K.size else 0.0
            if top <= 1e-12 * max(1.0, np.linalg.norm(P)):
                if best is None or c > best[1] + 1e-12:
                    best = (P, c)
        if best is not None:
            return best
    raise CertificateError(
        "no feasible (P, c) on the search grid; this does not prove the pair is undetectable"
    )


# ---------------------------------------------------------------------------
# schedules

_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)


def smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _gauss(fn: Callable, a: float, b: float) -> float:
    if b <= a:
        return 0.0
    t = 0.5 * (b - a) * _GL_X + 0.5 * (a + b)
    return float(0.5 * (b - a) * np.dot(_GL_W, fn(t)))


def _ramp_cell_integrals(grid: TimeGrid, t0: float, ramp: float, fn: Callable, default: np.ndarray):
    """Cell integrals of ``fn`` with cells meeting the ramp integrated by Gauss rules."""
    cells = np.array(default, dtype=float)
    nodes = grid.nodes
    tr = t0 + ramp
    last = min(grid.count - 2, int(math.floor((tr - grid.t_start) / grid.dt)))
    for i in range(0, last + 1):
        a, b = nodes[i], nodes[i + 1]
        mid = min(max(tr, a), b)
        cells[i] = _gauss(fn, a, mid) + _gauss(fn, mid, b)
    return cells


@dataclass(frozen=True, eq=False)
class FactISchedule:
    ell: TimeGridFunction
    h: TimeGridFunction
    ramp_time: float
    theta_floor: float
    ell_full: TimeGridFunction
    integral: float

    def __iter__(self):
        return iter((self.ell, self.h))


def fact_I_schedule(phi: TimeGridFunction, zeta: TimeGridFunction, theta: TimeGridFunction,
                    eps: float, window: CausalityWindow, ramp0: float = 0.1,
                    max_rounds: int = 60) -> FactISchedule:
    """Ramp-and-threshold gain ``l = ramp * phi / max(theta, delta)`` with ``int h < 0.9 eps``.

    ``h = (phi - l theta) zeta``. Each round shortens the ramp (by at least
    half, more when the integral is far over budget) and divides the
    threshold by ten. Ramps shorter than a grid step are integrated
    exactly on the cells they touch.
    """
    if not eps > 0:
        raise ScheduleInfeasible(f"eps must be positive, got {eps}")
    grid = phi.grid
    f, z, th = phi.values, zeta.values, theta.values
    if np.any(z < 0) or np.any(th < 0) or np.any(f < 0):
        raise ScheduleInfeasible("phi, zeta and theta must be nonnegative")
    nodes = grid.nodes
    t0 = grid.t_start
    la = max(phi.lookahead_used, zeta.lookahead_used, theta.lookahead_used)
    zero = th <= 0.0
    if np.mean(zero[1:]) > 0.5 and np.any(z[zero] * f[zero] > 0):
        raise ScheduleInfeasible("theta vanishes on most of the horizon")
    delta0 = 0.1 * float(th.max()) if th.max() > 0 else 1.0
    ramp_floor = grid.dt * 1e-30
    budget = 0.9 * eps
    ramp, delta = ramp0, delta0
    for k in range(max_rounds):
        if k:
            # the ramp's share of the integral scales with its length
            ramp = max(ramp * min(0.5, max(0.5 * budget / total, 1e-6)), ramp_floor)
            delta = max(delta / 10.0, 1e-300)
        full = f / np.maximum(th, delta)
        r = smoothstep((nodes - t0) / ramp)
        ell = r * full
        h = np.maximum((f - ell * th) * z, 0.0)

        def h_cont(t, ramp=ramp, delta=delta):
            fi, zi, ti = phi.interp(t), zeta.interp(t), theta.interp(t)
            ri = smoothstep((t - t0) / ramp)
            return np.maximum((fi - ri * fi / np.maximum(ti, delta) * ti) * zi, 0.0)

        default = 0.5 * grid.dt * (h[1:] + h[:-1])
        cells = _ramp_cell_integrals(grid, t0, ramp, h_cont, default)
        total = float(cells.sum())
        if total < budget:
            return FactISchedule(
                TimeGridFunction(grid, ell, la),
                TimeGridFunction(grid, h, la, cells),
                ramp,
                delta,
                TimeGridFunction(grid, full, la),
                total,
            )
        if ramp == ramp_floor and delta == 1e-300:
            break
    raise ScheduleInfeasible(
        f"integral of h stays >= {budget:.3g} at the resolution floor (last {total:.3g})"
    )


@dataclass(frozen=True, eq=False)
class CausalSchedule:
    ell: TimeGridFunction
    dbar: TimeGridFunction
    ramp_time: float
    delta: float
    ell_full: TimeGridFunction
    integral: float

    def __iter__(self):
        return iter((self.ell, self.dbar))


def _first_crossing(grid: TimeGrid, g: np.ndarray, level: float) -> Optional[float]:
    """Smallest ``T`` with ``int_{t0}^T g >= level`` for piecewise linear ``g >= 0``."""
    dt = grid.dt
    cells = 0.5 * dt * (g[1:] + g[:-1])
    cum = np.concatenate([[0.0], np.cumsum(cells)])
    idx = np.nonzero(cum >= level)[0]
    if len(idx) == 0:
        return None
    i = int(idx[0])
    if i == 0:
        return 0.0
    i -= 1
    rem = level - cum[i]
    g0, g1 = g[i], g[i + 1]
    slope = (g1 - g0) / dt
    # root of g0 s + slope s^2 / 2 = rem, in the form that does not cancel
    disc = g0 * g0 + 2.0 * slope * rem
    root = math.sqrt(max(disc, 0.0))
    s = 2.0 * rem / (g0 + root) if g0 + root > 0 else dt
    return i * dt + min(max(s, 0.0), dt)


def causal_schedule(phi: TimeGridFunction, a_of_y: TimeGridFunction, mbar: TimeGridFunction,
                    dhat: TimeGridFunction, eps: float, delta: Optional[float] = None) -> CausalSchedule:
    """Causal gain ``l = eta phi / a^2`` with ``dbar = dhat - (1 - eta) phi mbar``.

    ``eta`` rises from 0 to 1 over the first ``Dt`` with
    ``int_{t0}^{t0+Dt} phi mbar = delta / 2``; the rate loss is therefore at
    most ``delta / 2 < eps``.
    """
    if not eps > 0:
        raise ScheduleInfeasible(f"eps must be positive, got {eps}")
    delta = 0.5 * eps if delta is None else float(delta)
    if not 0 < delta < eps:
        raise ScheduleInfeasible(f"need 0 < delta < eps, got delta={delta}")
    grid = phi.grid
    a = a_of_y.values
    if np.any(a == 0.0):
        i = int(np.argmax(a == 0.0))
        raise ScheduleInfeasible(f"a(t, y(t)) vanishes at t={grid.nodes[i]:.6g}; use fact_I_schedule")
    f, m = phi.values, mbar.values
    fm = f * m
    t0 = grid.t_start
    nodes = grid.nodes
    T = _first_crossing(grid, fm, 0.5 * delta)
    ramp = grid.t_end - t0 if T is None else T
    ramp = max(ramp, grid.dt * 1e-30)
    eta = smoothstep((nodes - t0) / ramp)
    full = f / (a * a)
    ell = eta * full
    loss = (1.0 - eta) * fm
    dbar = dhat.values - loss

    def loss_cont(t):
        return (1.0 - smoothstep((t - t0) / ramp)) * phi.interp(t) * mbar.interp(t)

    default = 0.5 * grid.dt * (loss[1:] + loss[:-1])
    cells = _ramp_cell_integrals(grid, t0, ramp, loss_cont, default)
    la = max(phi.lookahead_used, a_of_y.lookahead_used, mbar.lookahead_used, dhat.lookahead_used)
    return CausalSchedule(
        TimeGridFunction(grid, ell, la),
        TimeGridFunction(grid, dbar, la, dhat.cells() - cells),
        ramp,
        delta,
        TimeGridFunction(grid, full, la),
        float(cells.sum()),
    )


# ---------------------------------------------------------------------------
# bordered completion


@dataclass
class CompletionReport:
    inflated: bool
    log_det: list
    K_at_start: list
    tau_at_start: list

    def as_dict(self) -> dict:
        return {
            "inflated": self.inflated,
            "min_log_det": [float(np.min(v)) for v in self.log_det],
            "K_at_start": self.K_at_start,
            "tau_at_start": self.tau_at_start,
        }


def _completion(S: np.ndarray, P: np.ndarray, L: float):
    """Diagonal ``T`` bordering ``P`` with the rows of ``S``, last row first."""
    N, n1, n2 = S.shape
    Q = P - np.eye(n2)
    sign, logdet = np.linalg.slogdet(Q)
    taus = np.empty((N, n1))
    logs, K0, tau0 = [], [], []
    for step in range(n1):
        row = n1 - 1 - step
        v = np.concatenate([np.zeros((N, step)), S[:, row, :]], axis=1)
        # det([[tau-1, v'],[v, Q]]) = (tau-1) det Q + K with K = -det(Q) v'Q^{-1}v
        quad = np.einsum("ni,ni->n", v, np.linalg.solve(Q, v[..., None])[..., 0])
        # the relative excess keeps the Schur complement above the rounding error of quad
        ev = np.linalg.eigvalsh(Q)
        cond = np.abs(ev).max(axis=1) / np.maximum(np.abs(ev).min(axis=1), 1e-300)
        excess = np.maximum(SCHUR_EXCESS, 64.0 * np.finfo(float).eps * cond)
        tau = L + (1.0 + excess) * quad
        Kval = -np.exp(logdet) * quad * sign
        taus[:, row] = tau
        newQ = np.zeros((N, step + 1 + n2, step + 1 + n2))
        newQ[:, 0, 0] = tau - 1.0
        newQ[:, 0, 1:] = v
        newQ[:, 1:, 0] = v
        newQ[:, 1:, 1:] = Q
        Q = newQ
        sign, logdet = np.linalg.slogdet(Q)
        logs.append(np.where(sign > 0, logdet, -np.inf))
        K0.append(float(Kval[0]))
        tau0.append(float(tau[0]))
    return taus, logs, K0, tau0


def fact_II_completion(S: TimeGridFunction, P: Certificate, L: float):
    """Diagonal ``T`` with ``det(P_i - I) >= (L - 1) det(P_{i-1} - I) > 0`` at every stage.

    Each ``tau`` exceeds the exact bordering value ``L + v'Q^-1 v`` by a
    relative excess on the quadratic term (``SCHUR_EXCESS``, or more when
    ``Q`` is ill-conditioned), so the identity holds with a positive margin
    and ``tau(t0) = L`` is unchanged.

    Returns ``(T, report)``. ``P - I`` must be nonsingular; a singular one is
    inflated by the factor ``1 + 1e-8`` first and the inflation is reported.
    """
    Sv = S.values
    if Sv.ndim != 3:
        raise ValueError("S must be matrix valued")
    Pv = P.P.values
    inflated = False
    if np.any(np.linalg.eigvalsh(Pv - np.eye(P.dim))[:, 0] <= 1e-12):
        Pv = Pv * (1.0 + 1e-8)
        inflated = True
    if np.any(np.abs(Sv[0]) > 1e-12 * max(1.0, float(np.abs(Sv).max()))):
        raise CertificateError("S must vanish at the initial time")
    taus, logs, K0, tau0 = _completion(Sv, Pv, L)
    for i, lg in enumerate(logs):
        if not np.all(np.isfinite(lg)):
            j = int(np.argmax(~np.isfinite(lg)))
            raise CertificateError(
                f"det(P_{i + 1} - I) <= 0 at t={S.grid.nodes[j]:.6g} (numerical degeneracy)"
            )
    n1 = Sv.shape[1]
    T = np.zeros((len(Sv), n1, n1))
    T[:, np.arange(n1), np.arange(n1)] = taus
    la = max(S.lookahead_used, P.lookahead_used)
    return TimeGridFunction(S.grid, T, la), CompletionReport(inflated, logs, K0, tau0)


def _assemble(T, S, P):
    n1, n2 = T.shape[-1], P.shape[-1]
    N = len(T)
    out = np.empty((N, n1 + n2, n1 + n2))
    out[:, :n1, :n1] = T
    out[:, :n1, n1:] = S
    out[:, n1:, :n1] = np.swapaxes(S, 1, 2)
    out[:, n1:, n1:] = P
    return out


def _derivative(values: np.ndarray, grid: TimeGrid, causal: bool) -> np.ndarray:
    if causal:
        d = np.empty_like(values)
        d[1:] = (values[1:] - values[:-1]) / grid.dt
        d[0] = 0.0
        return d
    return np.array(finite_difference(TimeGridFunction(grid, values)).values)


# ---------------------------------------------------------------------------
# kernel inequality


def kernel_inequality_check(P: np.ndarray, Pdot: np.ndarray, d: np.ndarray, base: np.ndarray,
                            lo: np.ndarray, hi: np.ndarray, rows, cols, kernel: np.ndarray,
                            level: int = 30, nodes: Optional[np.ndarray] = None,
                            slack: float = KERNEL_SLACK) -> dict:
    """Max over nodes, kernel directions and box vertices of the dissipation form.

    ``kernel`` is an ``n x m`` orthonormal basis (constant in time). The form
    ``e'P A e + 1/2 e'Pdot e + d e'P e`` is evaluated exactly over the box
    vertices through the coordinate-wise sup.
    """
    n, m = kernel.shape
    N = len(P)
    if m == 0:
        return {"passed": True, "max_form": -math.inf, "samples": 0}
    U = unit_sphere_samples(m, level).representatives if m > 1 else np.ones((1, 1))
    W = U @ kernel.T
    M0 = _sym(np.einsum("nij,njk->nik", P, base)) + 0.5 * Pdot + d[:, None, None] * P
    zero = np.zeros((N, n, n))
    _, worst, arg = dissipation_scan(M0, P, lo, hi, rows, cols, zero, W, np.zeros(N))
    i = int(np.argmax(worst))
    t = None if nodes is None else float(nodes[i])
    return {
        "passed": bool(worst[i] <= slack),
        "max_form": float(worst[i]),
        "t": t,
        "e": W[arg[i]].tolist(),
        "samples": int(len(W)),
        "slack": slack,
    }


# ---------------------------------------------------------------------------
# composite lift


def _as_matrix_fn(x, grid: TimeGrid, k: int) -> np.ndarray:
    if isinstance(x, TimeGridFunction):
        v = np.asarray(x.values, dtype=float)
        return v.reshape(grid.count, k, -1)
    arr = np.asarray(x, dtype=float)
    return np.broadcast_to(arr.reshape(1, k, -1), (grid.count, k, arr.size // k)).copy()


def lift_composite(block: Certificate, block_template: FactorizationTemplate, a_fn: TimeGridFunction,
                   B_fn, box: BoxValuedMap, eps: float, window: CausalityWindow, mode: str,
                   tape: OutputTape, sphere_level: int = 90, n1: int = 1,
                   candidates: Optional[Sequence] = None, stage=None) -> LiftedCertificate:
    """Border a certificate of the x2-block into one for the full composite state.

    ``a_fn`` holds ``a(t, y(t))`` on the block grid and ``B_fn`` the ``n1 x n2``
    matrix ``B`` (constant or a grid function). In causal mode the block gain
    is the inflated maximum over ``candidates`` (a sequence of
    ``(certificate, tape)`` pairs), so the ramp length does not depend on the
    actual output.
    """
    from .gain_synthesis import SynthesisFailed, synthesize

    if mode not in ("causal", "noncausal"):
        raise ValueError(f"unknown mode {mode!r}")
    grid = block.grid
    n2 = block.dim
    nodes = grid.nodes
    causal = mode == "causal"
    B = _as_matrix_fn(B_fn, grid, n1)
    a = np.asarray(a_fn.values, dtype=float).reshape(grid.count)
    try:
        gain = synthesize(block, box, block_template, B, block.eps + 0.5 * eps, window,
                          sphere_level, tape, candidates=candidates)
    except SynthesisFailed as exc:
        raise LiftFailed(f"block gain synthesis failed: {exc}", "block_gain", getattr(exc, "witness", {}), stage) from exc
    phi, dhat = gain.phi, gain.dbar
    m = np.linalg.eigvalsh(np.einsum("nki,nkj->nij", B, B))[:, -1]
    la_outer = max(phi.lookahead_used, a_fn.lookahead_used)
    zeta = TimeGridFunction(grid, m, 0.0)
    if causal:
        sched = causal_schedule(phi, a_fn, zeta, dhat, 0.5 * eps)
        ell, dbar = sched.ell, sched.dbar
        h = TimeGridFunction(grid, dhat.values - dbar.values, dbar.lookahead_used, dhat.cells() - dbar.cells())
    else:
        theta = TimeGridFunction(grid, a * a, a_fn.lookahead_used)
        sched = fact_I_schedule(phi, zeta, theta, 0.5 * eps, window)
        ell, h = sched.ell, sched.h
        dbar = TimeGridFunction(grid, dhat.values - h.values, max(dhat.lookahead_used, h.lookahead_used),
                                dhat.cells() - h.cells())
    S = -(ell.values * a)[:, None, None] * B
    S_full = -(sched.ell_full.values * a)[:, None, None] * B
    la = max(la_outer, ell.lookahead_used)
    S_fn = TimeGridFunction(grid, S, la)
    T_fn, comp = fact_II_completion(S_fn, block, block.L)
    Pbar = _assemble(T_fn.values, S, block.P.values)
    # a ramp shorter than one step is invisible to differences on the grid:
    # differentiate the post-ramp matrix and use the ramp's zero slope at t0
    sub_cell = sched.ramp_time < grid.dt
    if sub_cell:
        taus_full = _completion(S_full, block.P.values, block.L)[0]
        T_full = np.zeros((grid.count, n1, n1))
        T_full[:, np.arange(n1), np.arange(n1)] = taus_full
        Pdot = _derivative(_assemble(T_full, S_full, block.P.values), grid, causal)
        Pdot[0] = 0.0
        Pdot[0, n1:, n1:] = block.Pdot.values[0]
    else:
        Pdot = _derivative(Pbar, grid, causal)
    if causal:
        Pdot[0, n1:, n1:] = block.Pdot.values[0]
    la_p = max(la, T_fn.lookahead_used) + (0.0 if causal else grid.dt)
    cert = Certificate(
        TimeGridFunction(grid, Pbar, la_p),
        TimeGridFunction(grid, Pdot, la_p),
        dbar,
        block.L,
        block.eps + eps,
        "causal" if causal else "noncausal",
        window.tau0,
        block.provenance + ({"stage": "composite_lift" if stage is None else f"chain_stage_{stage}",
                             "eps": float(eps), "ramp_time": float(sched.ramp_time),
                             "schedule": "causal" if causal else "fact_I",
                             "completion": comp.as_dict()},),
        block.growth_floor,
    )
    gates = cert.gates()
    report = {"gates": gates.as_dict(), "completion": comp.as_dict(), "ramp_time": sched.ramp_time,
              "schedule_integral": sched.integral, "gain": gain.summary()}
    for name in ("psd", "initial_norm", "budget"):
        if not gates.checks[name]["passed"]:
            raise LiftFailed(f"lifted certificate fails {name}: {gates.checks[name]}", name,
                             gates.checks[name], stage)
    # kernel form on (0, e): e'S'aBe + e'PDe + 1/2 e'Pdot e + dbar e'Pe
    lo, hi = box.lower.values, box.upper.values
    ys = tape.read_many(nodes, nodes)
    base = block_template.base_on(nodes, ys)
    coupling = np.einsum("nji,njk->nik", S, a[:, None, None] * B)
    Pb = block.P.values
    M0 = _sym(coupling + np.einsum("nij,njk->nik", Pb, base)) + 0.5 * block.Pdot.values + dbar.values[:, None, None] * Pb
    U = unit_sphere_samples(n2, sphere_level).representatives if n2 > 1 else np.ones((1, 1))
    zero = np.zeros_like(Pb)
    _, worst, arg = dissipation_scan(M0, Pb, lo, hi, block_template.rows, block_template.cols,
                                     zero, U, np.zeros(grid.count))
    i = int(np.argmax(worst))
    kern = {"passed": bool(worst[i] <= KERNEL_SLACK), "max_form": float(worst[i]),
            "t": float(nodes[i]), "e": U[arg[i]].tolist(), "samples": int(len(U))}
    report["kernel"] = kern
    if not kern["passed"]:
        raise LiftFailed(f"kernel inequality violated: {kern}", "kernel", kern, stage)
    return LiftedCertificate(block, S_fn, T_fn, ell, h, dbar, cert, phi, report)


# ---------------------------------------------------------------------------
# triangular chain


def _tail_decay(grid: TimeGrid) -> TimeGridFunction:
    return TimeGridFunction(grid, 1.0 / (1.0 + grid.nodes - grid.t_start), 0.0)


def triangular_chain(plant: PlantModel, R: float, t0: float, t_bar0: float, xi: float, L: float,
                     eps_R: float, window: CausalityWindow, mode: str, tape: OutputTape, grid: TimeGrid,
                     sphere_level: int = 90, candidates: Optional[Sequence] = None,
                     d_first: Optional[TimeGridFunction] = None):
    """Full-order certificate for a strict-feedback plant by repeated lifting.

    ``grid`` must start at ``t_bar0``. Returns ``(certificate, stages)`` where
    ``stages`` lists the certificate after each lift (stage ``k`` carries the
    budget ``k eps_R / n``). In causal mode ``candidates`` is a sequence of
    candidate tapes; the chain is built along each of them in lock step.
    """
    if not isinstance(plant.structure, TriangularStructure):
        raise TypeError(f"{plant.name} does not have triangular structure")
    if abs(grid.t_start - t_bar0) > 1e-12:
        raise ValueError("grid must start at t_bar0")
    n = plant.n
    template = triangular_template(plant)
    box = triangular_box(plant, R, t0, xi, grid)
    stage_eps = eps_R / n
    d1 = d_first if d_first is not None else _tail_decay(grid)
    causal = mode == "causal"
    first = constant_certificate(np.array([[L]]), d1, L, stage_eps,
                                 "causal" if causal else "noncausal", window.tau0,
                                 provenance="chain_stage_1")
    tapes = [tape] + list(candidates or [])
    certs = [first] * len(tapes)
    stages = [first]
    nodes = grid.nodes
    for k in range(1, n):
        top = n - k - 1  # zero-based index of the row being added
        sub = template.block(top + 1)
        coords = template.block_coords(top + 1)
        sub_box = box.select(coords)
        lifted = []
        for c, tp in zip(certs, tapes):
            ys = tp.read_many(nodes, nodes)
            a_vals = np.array([plant.structure.a_funcs(t, y)[top] for t, y in zip(nodes, ys)])
            lifted.append((c, tp, a_vals))
        cand_pairs = [(c, tp) for c, tp, _ in lifted[1:]] if causal else None
        new = []
        for idx, (c, tp, a_vals) in enumerate(lifted):
            Bk = np.zeros((1, k))
            Bk[0, 0] = 1.0
            try:
                res = lift_composite(c, sub, TimeGridFunction(grid, a_vals, 0.0 if causal else c.tau0),
                                     Bk, sub_box, stage_eps, window, mode, tp, sphere_level, 1,
                                     candidates=cand_pairs, stage=k + 1)
            except LiftFailed as exc:
                exc.stage = k + 1
                raise
            new.append(res.full)
            if idx == 0:
                stages.append(res)
        certs = new
    final = certs[0]
    return final, stages


# ---------------------------------------------------------------------------
# serialization


def certificate_to_json(cert: Certificate, extra: Optional[dict] = None) -> str:
    g = cert.grid
    doc = {
        "grid": {"t_start": g.t_start, "dt": g.dt, "count": g.count},
        "dim": cert.dim,
        "L": cert.L,
        "eps": cert.eps,
        "causality": cert.causality,
        "tau0": cert.tau0,
        "growth_floor": cert.growth_floor,
        "P": cert.P.values.reshape(g.count, -1).tolist(),
        "Pdot": cert.Pdot.values.reshape(g.count, -1).tolist(),
        "d": cert.d.values.tolist(),
        "d_cells": None if cert.d.cell_integrals is None else cert.d.cell_integrals.tolist(),
        "lookahead": {"P": cert.P.lookahead_used, "d": cert.d.lookahead_used},
        "provenance": list(cert.provenance),
    }
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=1, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not serializable: {type(o).__name__}")


def certificate_from_json(text: str) -> Certificate:
    doc = json.loads(text)
    gd = doc["grid"]
    grid = TimeGrid(gd["t_start"], gd["dt"], gd["count"])
    dim = doc["dim"]
    P = np.asarray(doc["P"], dtype=float).reshape(grid.count, dim, dim)
    Pdot = np.asarray(doc["Pdot"], dtype=float).reshape(grid.count, dim, dim)
    la = doc.get("lookahead", {})
    d = TimeGridFunction(grid, np.asarray(doc["d"], dtype=float), la.get("d", 0.0), doc.get("d_cells"))
    return Certificate(
        TimeGridFunction(grid, P, la.get("P", 0.0)),
        TimeGridFunction(grid, Pdot, la.get("P", 0.0)),
        d,
        float(doc["L"]),
        float(doc["eps"]),
        doc["causality"],
        float(doc.get("tau0", 0.0)),
        tuple(doc.get("provenance", ())),
        float(doc.get("growth_floor", DEFAULT_GROWTH_FLOOR)),
    )
