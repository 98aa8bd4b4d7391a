"""Output-injection gains that make a certificate dissipative on the whole space.

Pipeline: shift the certificate rate down by an integrable bump, find the
sampled directions where the dissipation form can be nonnegative (the bad
set), measure how far they are from the kernel of the output map, turn that
margin into a capacity bound and smooth it into a gain. The gain is then
checked at every node, sample and box vertex; offending windows are doubled.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .certificates import Certificate, _json_default, _sym
from .factorization import BoxValuedMap, FactorizationTemplate
from .kernels import dissipation_scan, vertex_norm_max
from .model import CausalityWindow, OutputTape
from .numerics import (
    TimeGrid,
    TimeGridFunction,
    UnitSphereSample,
    _half_width_nodes,
    smooth_upper_envelope,
    unit_sphere_samples,
    windowed_max,
    windowed_min,
)

__all__ = [
    "SynthesisFailed",
    "GainProfile",
    "shifted_rate",
    "omega",
    "omega_all",
    "omega_bar",
    "capacity",
    "synthesize",
    "verify_gain",
    "gain_to_json",
]

POSITIVITY = 1e-9
VERIFY_SLACK = 1e-7
MAX_ROUNDS = 10
CANDIDATE_INFLATION = 1.1


class SynthesisFailed(RuntimeError):
    def __init__(self, message: str, witness: Optional[dict] = None):
        self.witness = witness or {}
        super().__init__(message)


@dataclass(frozen=True, eq=False)
class GainProfile:
    phi: TimeGridFunction
    dbar: TimeGridFunction
    eps_bar: float
    omega: TimeGridFunction
    omega_bar: TimeGridFunction
    C: TimeGridFunction
    lookahead_used: float
    rounds: int = 0
    verification: dict = field(default_factory=dict)

    @property
    def grid(self) -> TimeGrid:
        return self.phi.grid

    def summary(self) -> dict:
        return {
            "phi_max": float(self.phi.values.max()),
            "phi_start": float(self.phi.values[0]),
            "C_max": float(self.C.values.max()),
            "omega_min": float(self.omega.values.min()),
            "eps_bar": self.eps_bar,
            "lookahead_used": self.lookahead_used,
            "rounds": self.rounds,
            "verification": self.verification,
        }


def shifted_rate(cert: Certificate, eps_bar: float) -> TimeGridFunction:
    """``d(t) - 2 (eps_bar - eps) / (pi (1 + (t - t0)^2))``, budget raised to ``eps_bar``."""
    if not eps_bar > cert.eps:
        raise ValueError(f"need eps_bar > cert.eps, got {eps_bar} <= {cert.eps}")
    g = cert.grid
    s = g.nodes - g.t_start
    gap = eps_bar - cert.eps
    bump = 2.0 * gap / (math.pi * (1.0 + s * s))
    cells = None
    if cert.d.cell_integrals is not None:
        exact = (2.0 * gap / math.pi) * np.diff(np.arctan(s))
        cells = cert.d.cell_integrals - exact
    return TimeGridFunction(g, cert.d.values - bump, cert.d.lookahead_used, cells)


def _output_stack(H, grid: TimeGrid, n: int) -> np.ndarray:
    if isinstance(H, TimeGridFunction):
        v = np.asarray(H.values, dtype=float)
        return v.reshape(grid.count, -1, n)
    if callable(H):
        return np.array([np.atleast_2d(H(t)) for t in grid.nodes], dtype=float)
    H = np.asarray(H, dtype=float)
    if H.ndim == 3:
        return H
    H = np.atleast_2d(H)
    return np.broadcast_to(H, (grid.count,) + H.shape).copy()


@dataclass
class _Prepared:
    P: np.ndarray
    Pdot: np.ndarray
    dbar: np.ndarray
    base: np.ndarray
    M0: np.ndarray
    G: np.ndarray
    lo: np.ndarray
    hi: np.ndarray


def _prepare(cert: Certificate, box: BoxValuedMap, template: FactorizationTemplate, H,
             dbar: np.ndarray, tape: OutputTape, lookahead: float) -> _Prepared:
    grid = cert.grid
    if box.grid.count != grid.count or abs(box.grid.t_start - grid.t_start) > 1e-12:
        raise ValueError("box and certificate must share a grid")
    nodes = grid.nodes
    ys = tape.read_many(nodes - lookahead, nodes)
    base = template.base_on(nodes, ys)
    P = cert.P.values
    Pdot = cert.Pdot.values
    Hs = _output_stack(H, grid, cert.dim)
    G = np.einsum("nki,nkj->nij", Hs, Hs)
    M0 = _sym(np.einsum("nij,njk->nik", P, base)) + 0.5 * Pdot + dbar[:, None, None] * P
    return _Prepared(P, Pdot, dbar, base, M0, G, box.lower.values, box.upper.values)


def _samples(dim: int, level: int) -> np.ndarray:
    if dim == 1:
        return np.ones((1, 1))
    return unit_sphere_samples(dim, level).representatives


def omega_all(prep: _Prepared, template: FactorizationTemplate, W: np.ndarray) -> np.ndarray:
    N = len(prep.P)
    om2, _, _ = dissipation_scan(prep.M0, prep.P, prep.lo, prep.hi, template.rows, template.cols,
                                 prep.G, W, np.zeros(N))
    return np.sqrt(om2)


def omega(t: float, cert: Certificate, box: BoxValuedMap, template: FactorizationTemplate, H,
          dbar_t: float, sphere: UnitSphereSample, tape: OutputTape, t_now: Optional[float] = None) -> float:
    """Smallest ``|H w|`` over sampled bad directions at time ``t`` (``inf`` if none)."""
    grid = cert.grid
    i = grid.index_of(t)
    t_now = t if t_now is None else t_now
    y = tape.read(t_now, t)
    base = np.asarray(template.base(t, y), dtype=float)[None]
    P = cert.P.values[i : i + 1]
    Pdot = cert.Pdot.values[i : i + 1]
    Hs = _output_stack(H, grid, cert.dim)[i : i + 1]
    G = np.einsum("nki,nkj->nij", Hs, Hs)
    M0 = _sym(P @ base) + 0.5 * Pdot + dbar_t * P
    W = sphere.representatives if sphere.dimension > 1 else sphere.points[:1]
    om2, _, _ = dissipation_scan(M0, P, box.lower.values[i : i + 1], box.upper.values[i : i + 1],
                                 template.rows, template.cols, G, W, np.zeros(1))
    return float(math.sqrt(om2[0]))


def omega_bar(om: TimeGridFunction, window: CausalityWindow) -> TimeGridFunction:
    """``1 / omega^2`` where the windowed infimum of ``omega`` is positive, else 0."""
    g = om.grid
    w = np.asarray(om.values, dtype=float)
    half = _half_width_nodes(window.omega_half_width, g.dt)
    inf = windowed_min(w, half)
    with np.errstate(divide="ignore"):
        out = np.where((inf > POSITIVITY) & np.isfinite(w), 1.0 / (w * w), 0.0)
    return TimeGridFunction(g, out, max(om.lookahead_used, window.omega_lookahead))


def capacity(prep: _Prepared, template: FactorizationTemplate, box: BoxValuedMap,
             wbar: np.ndarray) -> np.ndarray:
    """``wbar * sup_q (|P||A(q)| + 1/2 |Pdot| + |dbar||P|)`` by vertex enumeration."""
    N = len(prep.P)
    C = np.zeros(N)
    on = wbar > 0
    if not np.any(on):
        return C
    idx = np.nonzero(on)[0]
    nP = np.linalg.norm(prep.P[idx], ord=2, axis=(1, 2))
    nPd = np.linalg.norm(prep.Pdot[idx], ord=2, axis=(1, 2))
    nA = vertex_norm_max(prep.base[idx], prep.lo[idx], prep.hi[idx], template.rows, template.cols, box.active)
    C[idx] = wbar[idx] * (nP * nA + 0.5 * nPd + np.abs(prep.dbar[idx]) * nP)
    return C


def _witness_q(prep: _Prepared, template: FactorizationTemplate, i: int, w: np.ndarray) -> list:
    pw = prep.P[i] @ w
    c = pw[template.rows] * w[template.cols]
    lo, hi = prep.lo[i], prep.hi[i]
    # first maximising vertex in lexicographic order: prefer the lower end on ties
    return np.where(hi * c > lo * c, hi, lo).tolist()


def verify_gain(prep: _Prepared, template: FactorizationTemplate, W: np.ndarray, phi: np.ndarray,
                slack: float = VERIFY_SLACK):
    _, worst, arg = dissipation_scan(prep.M0, prep.P, prep.lo, prep.hi, template.rows, template.cols,
                                     prep.G, W, phi)
    return worst, arg


def synthesize(cert: Certificate, box: BoxValuedMap, template: FactorizationTemplate, H, eps_bar: float,
               window: CausalityWindow, sphere_level: int, tape: OutputTape,
               candidates: Optional[Sequence] = None, margin_ratio: float = 0.05) -> GainProfile:
    """Dominating gain for ``(cert, box, template)`` verified at every node and sample.

    ``candidates`` (causal use) is a sequence of ``(certificate, tape)`` pairs;
    the capacity is then the inflated maximum over them, which makes the gain
    independent of the actual output.
    """
    grid = cert.grid
    n = cert.dim
    dbar = shifted_rate(cert, eps_bar)
    la_phi = window.omega_lookahead + (window.tau - window.tau0) / 4.0
    W = _samples(n, sphere_level)
    prep = _prepare(cert, box, template, H, dbar.values, tape, 0.0 if window.is_causal else la_phi)
    om = omega_all(prep, template, W)
    if np.any(om <= POSITIVITY):
        i = int(np.argmin(om))
        raise SynthesisFailed(
            f"bad direction in the kernel of the output map at t={grid.nodes[i]:.6g} (omega = 0)",
            {"t": float(grid.nodes[i]), "omega": float(om[i])},
        )
    om_fn = TimeGridFunction(grid, om, cert.lookahead_used)
    wbar = omega_bar(om_fn, window)
    C = capacity(prep, template, box, wbar.values)
    if candidates:
        cs = []
        for c_cert, c_tape in candidates:
            c_dbar = shifted_rate(c_cert, eps_bar)
            cp = _prepare(c_cert, box, template, H, c_dbar.values, c_tape, 0.0)
            c_om = omega_all(cp, template, W)
            c_wbar = omega_bar(TimeGridFunction(grid, c_om), window)
            cs.append(capacity(cp, template, box, c_wbar.values))
        C = CANDIDATE_INFLATION * np.max(np.stack(cs), axis=0)
    C_fn = TimeGridFunction(grid, C, wbar.lookahead_used)
    margin = margin_ratio * (1.0 + float(C.max()))
    half_window = (window.tau - window.tau0) / 4.0
    phi = smooth_upper_envelope(C_fn, margin, half_window).values.copy()
    half = _half_width_nodes(half_window, grid.dt)
    rounds = 0
    while True:
        worst, arg = verify_gain(prep, template, W, phi)
        bad = worst > VERIFY_SLACK
        if not np.any(bad):
            break
        if rounds == MAX_ROUNDS:
            i = int(np.argmax(worst))
            w = W[arg[i]]
            raise SynthesisFailed(
                f"gain verification still fails after {MAX_ROUNDS} doublings at t={grid.nodes[i]:.6g}",
                {"t": float(grid.nodes[i]), "w": w.tolist(), "q": _witness_q(prep, template, i, w),
                 "excess": float(worst[i])},
            )
        grow = windowed_max(bad.astype(float), half) > 0
        phi[grow] *= 2.0
        rounds += 1
    verification = {
        "max_excess": float(worst.max()),
        "slack": VERIFY_SLACK,
        "nodes": int(grid.count),
        "samples": int(len(W)),
        "vertices": int(2 ** int(np.count_nonzero(box.active))),
    }
    return GainProfile(
        TimeGridFunction(grid, phi, la_phi if not window.is_causal else 0.0),
        dbar,
        float(eps_bar),
        om_fn,
        wbar,
        C_fn,
        la_phi if not window.is_causal else 0.0,
        rounds,
        verification,
    )


def gain_to_json(gain: GainProfile) -> str:
    g = gain.grid
    om = np.where(np.isfinite(gain.omega.values), gain.omega.values, -1.0)
    doc = {
        "grid": {"t_start": g.t_start, "dt": g.dt, "count": g.count},
        "phi": gain.phi.values.tolist(),
        "dbar": gain.dbar.values.tolist(),
        "eps_bar": gain.eps_bar,
        "omega": om.tolist(),
        "omega_sentinel": "-1 encodes an empty bad set",
        "omega_bar": gain.omega_bar.values.tolist(),
        "C": gain.C.values.tolist(),
        "lookahead_used": gain.lookahead_used,
        "rounds": gain.rounds,
        "verification": gain.verification,
    }
    return json.dumps(doc, indent=1, sort_keys=True, default=_json_default)
