"""Observers built from certificates and gains, and the switching scheme.

Each observer integrates ``z' = F(t, z, y) + phi P^-1 H' (y - H z)``. The gains
produced by the synthesis are large, so the default integrator is an
exponential Rosenbrock step (exact for the frozen linearisation, fourth
order overall); fixed-step RK4 is used when the linearisation is not stiff.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import expm

from .certificates import Certificate
from .gain_synthesis import GainProfile
from .model import OutputTape, PlantModel
from .numerics import IntegrationBlowup, TimeGrid, TimeGridFunction, cumulative_trapezoid

__all__ = [
    "ObserverTrajectory",
    "SwitchingSchedule",
    "StitchedEstimate",
    "saturation_factor",
    "segment_dynamics",
    "horizon_observer",
    "next_switch_time",
    "run_switching_observer",
]

RK4_STABLE = 2.5
JUMP_RATIO = 10.0
TAIL_SLACK = 0.1
SAT_SLACK = 1e-9


def saturation_factor(z, zeta: float) -> float:
    """1 inside ``|z| <= zeta``, linear fade to 0 at ``2 zeta``, 0 beyond."""
    if not zeta > 0:
        raise ValueError(f"zeta must be positive, got {zeta}")
    r = float(np.linalg.norm(z))
    if r <= zeta:
        return 1.0
    if r >= 2.0 * zeta:
        return 0.0
    return (2.0 * zeta - r) / zeta


def _saturation_gradient(z, zeta: float) -> np.ndarray:
    r = float(np.linalg.norm(z))
    if r <= zeta or r >= 2.0 * zeta:
        return np.zeros_like(z)
    return -np.asarray(z) / (r * zeta)


def segment_dynamics(m: int, base_field: Callable, zeta: float) -> Callable:
    """``(t, z, y) -> base_field(t, z, y) * saturation_factor(z, zeta)``."""
    if not zeta > 0:
        raise ValueError(f"zeta must be positive, got {zeta}")

    def fld(t, z, y):
        s = saturation_factor(z, zeta)
        if s == 0.0:
            return np.zeros_like(np.asarray(z, dtype=float))
        return s * np.asarray(base_field(t, z, y), dtype=float)

    fld.segment = m
    fld.zeta = zeta
    return fld


@dataclass(frozen=True, eq=False)
class ObserverTrajectory:
    z: TimeGridFunction
    sat: np.ndarray
    method: str
    flagged_initial_state: bool = False


def _gain_vectors(cert: Certificate, gain: GainProfile, plant: PlantModel, grid: TimeGrid) -> tuple:
    """Injection matrices ``phi P^-1 H'`` on ``grid`` (a subgrid of the certificate grid)."""
    cg = cert.grid
    i0 = cg.index_of(grid.t_start)
    sl = slice(i0, i0 + grid.count)
    P = cert.P.values[sl]
    phi = gain.phi.values[sl]
    Hs = np.array([np.atleast_2d(plant.H(t)) for t in grid.nodes])
    K = phi[:, None, None] * np.linalg.solve(P, np.swapaxes(Hs, 1, 2))
    return K, Hs


def horizon_observer(plant: PlantModel, cert: Certificate, gain: GainProfile, t_bar0: float, z0,
                     grid: TimeGrid, tape: OutputTape, zeta: Optional[float] = None,
                     method: str = "auto", substeps: int = 1) -> ObserverTrajectory:
    """Integrate the observer on ``grid`` (which starts at ``t_bar0``).

    ``zeta`` turns on the segment saturation. ``method`` is ``"rk4"``,
    ``"exprb"`` (exponential Rosenbrock) or ``"auto"``; ``substeps`` splits
    each cell for the exponential method.
    """
    if abs(grid.t_start - t_bar0) > 1e-12:
        raise ValueError("observer grid must start at t_bar0")
    z = np.array(z0, dtype=float)
    flagged = bool(np.any(z != 0.0))
    K, Hs = _gain_vectors(cert, gain, plant, grid)
    nodes = grid.nodes
    h = grid.dt
    if method == "auto":
        rho = np.linalg.norm(np.einsum("nik,nkj->nij", K, Hs), ord=2, axis=(1, 2)).max()
        method = "rk4" if rho * h <= RK4_STABLE else "exprb"
    if method == "exprb" and plant.jac is None:
        raise ValueError("exponential integration needs the plant Jacobian")
    sat = (lambda v: 1.0) if zeta is None else (lambda v: saturation_factor(v, zeta))
    n = plant.n
    out = np.empty((grid.count, n))
    sats = np.empty(grid.count)
    out[0] = z
    sats[0] = sat(z)

    if method == "rk4":
        Kf = TimeGridFunction(grid, K)

        def field_at(t, v):
            yv = tape.read(t, t)
            base = plant.F(t, v, yv) + Kf(t) @ (yv - plant.H(t) @ v)
            return sat(v) * base

        for i in range(grid.count - 1):
            t = nodes[i]
            k1 = field_at(t, z)
            k2 = field_at(t + 0.5 * h, z + 0.5 * h * k1)
            k3 = field_at(t + 0.5 * h, z + 0.5 * h * k2)
            k4 = field_at(t + h, z + h * k3)
            z = z + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(z)):
                raise IntegrationBlowup(t + h)
            out[i + 1] = z
            sats[i + 1] = sat(z)
        return ObserverTrajectory(TimeGridFunction(grid, out, cert.lookahead_used), sats, method, flagged)

    z_path, sats = _exprb43(plant, K, Hs, grid, tape, z, zeta, substeps)
    return ObserverTrajectory(TimeGridFunction(grid, z_path, cert.lookahead_used), sats, method, flagged)


def _stencil(i: int, count: int, causal: bool) -> np.ndarray:
    """Node indices of the cubic interpolant of ``y`` used on cell ``i``."""
    if causal:
        lo = max(0, i - 3)
        return np.arange(lo, i + 1)
    lo = min(max(0, i - 1), max(0, count - 4))
    return np.arange(lo, min(count, lo + 4))


def _phi_matrices(X: np.ndarray, order: int) -> list:
    """``[phi_1(X), ..., phi_order(X)]`` from one block exponential."""
    m = X.shape[0]
    B = np.zeros(((order + 1) * m, (order + 1) * m))
    B[:m, :m] = X
    for j in range(order):
        B[j * m : (j + 1) * m, (j + 1) * m : (j + 2) * m] = np.eye(m)
    E = expm(B)
    return [E[:m, (j + 1) * m : (j + 2) * m] for j in range(order)]


def _exprb43(plant, K, Hs, grid, tape, z0, zeta, substeps):
    """Fourth-order exponential Rosenbrock integration with time as an extra state.

    ``y`` enters through a cubic interpolant of its node values; the stencil
    only looks backwards when the tape is causal. ``K`` and ``H`` are
    interpolated linearly inside a cell.
    """
    n = plant.n
    N = grid.count
    nodes = grid.nodes
    causal = tape.mode == "causal"
    ahead = 0 if causal else 2
    # every node is read once, at the earliest time the stencils need it
    t_read = np.maximum(nodes - ahead * grid.dt, nodes[0])
    ys = tape.read_many(t_read, nodes)
    h = grid.dt / substeps
    out = np.empty((N, n))
    sats = np.empty(N)
    z = np.array(z0, dtype=float)
    out[0] = z
    sats[0] = 1.0 if zeta is None else saturation_factor(z, zeta)
    fd = 1e-6
    vander = {}

    for i in range(N - 1):
        idx = _stencil(i, N, causal)
        xs = nodes[idx]
        yst = ys[idx]
        t_i = nodes[i]
        Ka, Kb = K[i], K[i + 1]
        ka, kb = np.linalg.norm(Ka), np.linalg.norm(Kb)
        if max(ka, kb) > JUMP_RATIO * max(min(ka, kb), 1e-300):
            # a sub-cell ramp: the gain has settled to its right-node value
            Ka = Kb
        Kdot = (Kb - Ka) / grid.dt
        Hdot = (Hs[i + 1] - Hs[i]) / grid.dt
        key = tuple(idx - i)
        if key not in vander:
            offs = np.array(key, dtype=float)
            vander[key] = np.linalg.inv(np.vander(offs, len(offs)))
        # polynomial in the cell coordinate u = (t - t_i) / dt, highest power first
        coef = vander[key] @ yst
        deg = len(coef) - 1
        dcoef = coef[:-1] * np.arange(deg, 0, -1)[:, None] / grid.dt if deg else np.zeros_like(coef)

        def inputs(t):
            u = (t - t_i) / grid.dt
            y = coef[0].copy()
            for c in coef[1:]:
                y = y * u + c
            yd = np.zeros_like(y)
            for c in dcoef:
                yd = yd * u + c
            c = u
            return y, yd, (1 - c) * Ka + c * Kb, (1 - c) * Hs[i] + c * Hs[i + 1]

        def field(t, v, need_jac=False):
            y, yd, Kt, Ht = inputs(t)
            f = plant.F(t, v, y) + Kt @ (y - Ht @ v)
            if not need_jac:
                if zeta is not None:
                    f = saturation_factor(v, zeta) * f
                return f
            J = plant.jac(t, v, y) - Kt @ Ht
            dF = (plant.F(t + fd, v, y + fd * yd) - plant.F(t - fd, v, y - fd * yd)) / (2 * fd)
            ft = dF + Kdot @ (y - Ht @ v) + Kt @ (yd - Hdot @ v)
            if zeta is not None:
                s = saturation_factor(v, zeta)
                J = s * J + np.outer(f, _saturation_gradient(v, zeta))
                f, ft = s * f, s * ft
            return f, J, ft

        for j in range(substeps):
            t = t_i + j * h
            f, J, ft = field(t, z, True)
            Ja = np.zeros((n + 1, n + 1))
            Ja[:n, :n] = J
            Ja[:n, n] = ft
            fa = np.append(f, 1.0)
            p1h = _phi_matrices(0.5 * h * Ja, 1)[0]
            p1, _, p3, p4 = _phi_matrices(h * Ja, 4)
            base = h * (p1 @ fa)
            w2 = 0.5 * h * (p1h @ fa)
            D2 = np.append(field(t + w2[n], z + w2[:n]), 1.0) - fa - Ja @ w2
            w3 = base + h * (p1 @ D2)
            D3 = np.append(field(t + w3[n], z + w3[:n]), 1.0) - fa - Ja @ w3
            step = base + h * (p3 @ (16 * D2 - 2 * D3)) + h * (p4 @ (-48 * D2 + 12 * D3))
            z = z + step[:n]
            if not np.all(np.isfinite(z)):
                raise IntegrationBlowup(t + h)
        out[i + 1] = z
        sats[i + 1] = 1.0 if zeta is None else saturation_factor(z, zeta)
    return out, sats


def next_switch_time(dbar: TimeGridFunction, beta: Callable, L: float, m: int, t_m: float, t0: float,
                     grid: Optional[TimeGrid] = None):
    """Earliest node ``T >= t_m + 1`` past which ``exp(-int_{t_m}^t dbar)`` stays below threshold.

    ``dbar`` is the rate of the next segment and must be defined from ``t_m``.
    Returns ``(T, truncated)``; ``truncated`` means no node qualified and
    ``T`` is the end of the grid.
    """
    g = dbar.grid if grid is None else grid
    i0 = dbar.grid.index_of(t_m)
    cum = cumulative_trapezoid(dbar, i0)
    decay = np.exp(-cum)
    threshold = 1.0 / (beta(t_m, t0, m + 1) * (m + 1) * math.sqrt(L))
    # largest value over [t, horizon], evaluated from the right
    tail_max = np.maximum.accumulate(decay[::-1])[::-1]
    nodes = dbar.grid.nodes
    ok = (nodes >= t_m + 1.0 - 1e-9 * g.dt) & (tail_max <= threshold)
    ok[:i0] = False
    if not np.any(ok):
        return float(g.t_end), True
    return float(nodes[int(np.argmax(ok))]), False


@dataclass
class SwitchingSchedule:
    t: list
    xi: dict
    eps_bar: dict
    zeta: dict
    horizon_truncated: bool
    truncated_at: Optional[int] = None

    def as_dict(self) -> dict:
        return {
            "t": self.t,
            "xi": {str(k): v for k, v in self.xi.items()},
            "eps_bar": {str(k): v for k, v in self.eps_bar.items()},
            "zeta": {str(k): v for k, v in self.zeta.items()},
            "horizon_truncated": self.horizon_truncated,
            "truncated_at": self.truncated_at,
        }


@dataclass
class Segment:
    m: int
    start: float
    switch: float  # t_m, where the segment becomes active
    end: float  # t_{m+1}
    completed: bool
    z: TimeGridFunction
    sat: np.ndarray
    error: np.ndarray
    bound: np.ndarray
    zeta: float
    method: str


@dataclass
class StitchedEstimate:
    grid: TimeGrid
    Z: np.ndarray
    segment_index: np.ndarray
    sat_factor: np.ndarray
    segments: dict
    schedule: SwitchingSchedule
    report: dict = field(default_factory=dict)

    def error(self, x: np.ndarray) -> np.ndarray:
        return np.linalg.norm(x - self.Z, axis=1)


def _segment_checks(seg: Segment, m0: int, grid: TimeGrid) -> dict:
    out = {"m": seg.m, "applies": seg.m >= m0, "completed": seg.completed}
    zmax = float(np.max(np.linalg.norm(seg.z.values, axis=1)))
    out["saturation_inactive"] = {"passed": bool(zmax < seg.zeta - SAT_SLACK), "max_norm": zmax, "zeta": seg.zeta}
    ratio = seg.error / seg.bound
    j = int(np.argmax(ratio))
    out["error_bound"] = {
        "passed": bool(np.all(seg.error < seg.bound)),
        "violations": int(np.count_nonzero(seg.error >= seg.bound)),
        "max_ratio": float(ratio[j]),
        "t": float(seg.z.grid.nodes[j]),
    }
    nodes = seg.z.grid.nodes
    tail = (nodes >= seg.switch - 1e-9 * grid.dt) & (nodes <= seg.end + 1e-9 * grid.dt)
    if seg.completed and np.any(tail):
        emax = float(np.max(seg.error[tail]))
        out["tail_bound"] = {"passed": bool(emax <= (1.0 / seg.m) * (1.0 + TAIL_SLACK)),
                             "max_error": emax, "limit": 1.0 / seg.m, "slack": TAIL_SLACK}
    else:
        out["tail_bound"] = {"passed": None, "reason": "segment not completed on the horizon"}
    return out


def run_switching_observer(plant: PlantModel, cert_provider: Callable, gain_provider: Callable, t0: float,
                           x0, grid: TimeGrid, mode: str, tape: OutputTape, x_true: Optional[np.ndarray] = None,
                           eps_m: float = 0.1, L: float = 2.0, max_segments: int = 50,
                           method: str = "auto", log: Optional[Callable] = None) -> StitchedEstimate:
    """Switching observer: segment ``m`` is designed for ``|x0| <= m`` on ``[t_{m-1}, t_{m+1}]``.

    ``cert_provider(R, t_bar0, xi, eps, grid)`` returns ``(certificate, box, template)``
    and ``gain_provider(cert, box, template, eps_bar, grid)`` a verified
    :class:`GainProfile`; ``grid`` there is the tail of the run grid from
    ``t_bar0``. ``x0`` and ``x_true`` are used only by the diagnostics.
    """
    x0 = np.asarray(x0, dtype=float)
    beta = plant.beta
    t_end = grid.t_end
    times = {0: float(t0), 1: float(t0)}
    xi, eps_bar, zeta = {}, {}, {}
    designs = {}
    say = log or (lambda msg: None)

    def design(m: int, t_bar0: float):
        eb = 2.0 * eps_m
        xi[m] = beta(times[m - 1], t0, m) * math.sqrt(L) * math.exp(eb)
        eps_bar[m] = eb
        i0 = grid.index_of(t_bar0)
        sub = grid.subgrid(i0, grid.count - 1)
        cert, box, template = cert_provider(m, t_bar0, xi[m], eps_m, sub)
        gain = gain_provider(cert, box, template, eb, sub)
        designs[m] = (cert, gain)
        say(f"segment {m}: designed on [{t_bar0:g}, {t_end:g}], phi max {gain.phi.values.max():.3g}")

    ranges = {}
    truncated = False
    truncated_at = None
    design(1, times[0])
    m = 1
    while True:
        if m + 1 > max_segments:
            truncated, truncated_at = True, m
            times[m + 1] = t_end
            ranges[m] = (times[m - 1], t_end, False)
            break
        if times[m] + 1.0 > t_end:
            times[m + 1] = t_end
            truncated, truncated_at = True, m
            ranges[m] = (times[m - 1], t_end, False)
            break
        design(m + 1, times[m])
        cert_next, gain_next = designs[m + 1]
        T, trunc = next_switch_time(gain_next.dbar, beta, L, m, times[m], t0)
        times[m + 1] = T
        if trunc:
            truncated, truncated_at = True, m
            ranges[m] = (times[m - 1], t_end, False)
            ranges[m + 1] = (times[m], t_end, False)
            break
        ranges[m] = (times[m - 1], T, True)
        m += 1
    for k, (a, b, done) in ranges.items():
        # the horizon stands in for an unreached switch time
        zeta[k] = beta(times.get(k + 1, t_end) if done else t_end, t0, k) + xi[k]

    segments = {}
    for k, (a, b, done) in sorted(ranges.items()):
        cert, gain = designs[k]
        i0, i1 = grid.index_of(a), grid.index_of(b)
        sub = grid.subgrid(i0, i1)
        traj = horizon_observer(plant, cert, gain, a, np.zeros(plant.n), sub, tape, zeta[k], method)
        if x_true is not None:
            err = np.linalg.norm(x_true[i0 : i1 + 1] - traj.z.values, axis=1)
        else:
            err = np.full(sub.count, np.nan)
        j0 = cert.grid.index_of(a)
        cum = cumulative_trapezoid(gain.dbar, j0)[j0 : j0 + sub.count]
        bound = beta(a, t0, k) * math.sqrt(L) * np.exp(-cum)
        switch = times[k]
        segments[k] = Segment(k, a, switch, b, done, traj.z, traj.sat, err, bound, zeta[k], traj.method)
        say(f"segment {k}: integrated on [{a:g}, {b:g}] with {traj.method}")

    n = plant.n
    Z = np.full((grid.count, n), np.nan)
    idx = np.zeros(grid.count, dtype=int)
    sat = np.ones(grid.count)
    for k in sorted(segments):
        seg = segments[k]
        lo = grid.index_of(times[k])
        hi = grid.index_of(seg.end)
        last = k == max(segments)
        # Z = z_m on [t_m, t_{m+1}); the final segment also covers the end node
        stop = hi + 1 if (last or not seg.completed) else hi
        i0 = grid.index_of(seg.start)
        if k > 1 and not segments[k - 1].completed:
            continue
        Z[lo:stop] = seg.z.values[lo - i0 : stop - i0]
        idx[lo:stop] = k
        sat[lo:stop] = seg.sat[lo - i0 : stop - i0]
    m0 = max(2, int(math.ceil(float(np.linalg.norm(x0)) - 1e-12)))
    schedule = SwitchingSchedule([times[k] for k in sorted(times) if k >= 1], xi, eps_bar, zeta, truncated,
                                 truncated_at)
    checks = {k: _segment_checks(seg, m0, grid) for k, seg in segments.items()}
    report = {"m0": m0, "segments": checks, "schedule": schedule.as_dict()}
    return StitchedEstimate(grid, Z, idx, sat, segments, schedule, report)
