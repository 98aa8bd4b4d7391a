"""Certificate and gain providers used by the switching observer and the harness.

A provider pair is built once per run. ``cert_provider(R, t_bar0, xi, eps, grid)``
returns ``(certificate, box, template)`` for the full state and
``gain_provider(cert, box, template, eps_bar, grid)`` the verified gain.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .certificates import (
    CertificateError,
    constant_certificate,
    detectability_certificate,
    lift_composite,
    triangular_chain,
)
from .factorization import (
    block_template,
    box_vertices,
    composite_box,
    composite_template,
    triangular_box,
    triangular_template,
)
from .gain_synthesis import synthesize
from .model import (
    CausalityWindow,
    CompositeStructure,
    OutputTape,
    PlantModel,
    TriangularStructure,
    simulate_plant,
)
from .numerics import TimeGrid, TimeGridFunction

__all__ = ["PROVIDERS", "DesignRecord", "make_providers", "block_kernel_rate", "full_template_and_box"]

PROVIDERS = ("constant", "detectability", "composite_lift", "triangular_chain")


@dataclass
class DesignRecord:
    """Everything built for one segment, kept for reports and JSON output."""

    R: float
    t_bar0: float
    xi: float
    eps: float
    cert: object = None
    box: object = None
    template: object = None
    gain: object = None
    stages: list = field(default_factory=list)


def full_template_and_box(plant: PlantModel, R: float, t0: float, xi: float, grid: TimeGrid):
    st = plant.structure
    if isinstance(st, TriangularStructure):
        return triangular_template(plant), triangular_box(plant, R, t0, xi, grid)
    if isinstance(st, CompositeStructure):
        return composite_template(plant), composite_box(plant, R, t0, xi, grid)
    raise CertificateError(f"{plant.name} has no factorization structure")


def block_kernel_rate(plant: PlantModel, box, grid: TimeGrid) -> TimeGridFunction:
    """Rate of ``P = L I`` on the x2-block: ``-max_q lambda_max(K' sym(D(q)) K)`` over box vertices.

    ``K`` spans the kernel of ``B``; the rate is taken at ``y = 0`` for the
    (state-independent) ``B`` of the built-in plants.
    """
    st = plant.structure
    n2 = plant.n - st.n1
    B = np.atleast_2d(st.B(grid.t_start, np.zeros(plant.k)))
    _, s, vt = np.linalg.svd(B)
    rank = int(np.sum(s > 1e-12))
    K = vt[rank:].T
    lo, hi = box.lower.values, box.upper.values
    D0 = np.zeros((n2, n2)) if st.D0 is None else np.asarray(st.D0(grid.t_start, np.zeros(plant.k)), dtype=float)
    rate = np.empty(grid.count)
    for i in range(grid.count):
        worst = -math.inf
        for v in box_vertices(lo[i], hi[i]):
            D = D0 + v.reshape(n2, n2)
            worst = max(worst, float(np.linalg.eigvalsh(K.T @ (0.5 * (D + D.T)) @ K)[-1]))
        rate[i] = -worst
    return TimeGridFunction(grid, rate)


def _H_stack(plant: PlantModel, grid: TimeGrid) -> np.ndarray:
    return np.array([np.atleast_2d(plant.H(t)) for t in grid.nodes])


def make_providers(plant: PlantModel, kind: str, params: dict, L: float, mode: str, window: CausalityWindow,
                   tape: OutputTape, t0: float, sphere_level: int = 90, margin_ratio: float = 0.05,
                   records: Optional[dict] = None):
    """Return ``(cert_provider, gain_provider)`` for provider ``kind``.

    ``records`` (if given) is filled with a :class:`DesignRecord` per ``R``.
    """
    if kind not in PROVIDERS:
        raise ValueError(f"unknown certificate provider {kind!r}; known: {list(PROVIDERS)}")
    causality = "causal" if mode == "causal" else "noncausal"
    store = records if records is not None else {}

    def cert_provider(R, t_bar0, xi, eps, grid):
        rec = DesignRecord(R, t_bar0, xi, eps)
        template, box = full_template_and_box(plant, R, t0, xi, grid)
        if kind == "constant":
            d = TimeGridFunction.constant(grid, float(params.get("d", 0.0)))
            cert = constant_certificate(L * np.eye(plant.n), d, L, eps, causality, window.tau0)
        elif kind == "triangular_chain":
            cand = None
            if mode == "causal":
                cand = [simulate_plant(plant, t0, x, _full_grid(tape), "causal")[1]
                        for x in _candidate_states(plant, R, params)]
            cert, stages = triangular_chain(plant, R, t0, t_bar0, xi, L, eps, window, mode, tape, grid,
                                            sphere_level, cand)
            rec.stages = stages
        else:
            cert, stages = _composite(plant, kind, params, L, eps, mode, window, tape, grid, R, xi, t0,
                                      sphere_level)
            rec.stages = stages
        rec.cert, rec.box, rec.template = cert, box, template
        store[R] = rec
        return cert, box, template

    def gain_provider(cert, box, template, eps_bar, grid):
        gain = synthesize(cert, box, template, _H_stack(plant, grid), eps_bar, window, sphere_level, tape,
                          margin_ratio=margin_ratio)
        for rec in store.values():
            if rec.cert is cert:
                rec.gain = gain
        return gain

    return cert_provider, gain_provider


def _full_grid(tape: OutputTape) -> TimeGrid:
    return tape.y.grid


def _candidate_states(plant: PlantModel, R: float, params: dict) -> list:
    """Initial states whose outputs bound the causal ramp; default: scaled axes."""
    given = params.get("candidates")
    if given:
        return [np.asarray(x, dtype=float) for x in given]
    out = []
    for j in range(plant.n):
        e = np.zeros(plant.n)
        e[j] = 0.9 * R
        out.append(e)
    return out


def _composite(plant, kind, params, L, eps, mode, window, tape, grid, R, xi, t0, sphere_level):
    st = plant.structure
    if not isinstance(st, CompositeStructure):
        raise CertificateError(f"{kind} needs a composite plant, {plant.name} is not one")
    n1 = st.n1
    n2 = plant.n - n1
    full_box = composite_box(plant, R, t0, xi, grid)
    causality = "causal" if mode == "causal" else "noncausal"
    if kind == "detectability":
        lo, hi = full_box.lower.values, full_box.upper.values
        if not np.allclose(lo, hi, rtol=0.0, atol=1e-12) or not np.allclose(lo, lo[0], rtol=0.0, atol=1e-12):
            raise CertificateError("detectability needs a constant linear x2-block (degenerate box)")
        Bbar = lo[0].reshape(n2, n2)
        if st.D0 is not None:
            Bbar = Bbar + np.asarray(st.D0(grid.t_start, np.zeros(plant.k)), dtype=float)
        B = np.atleast_2d(st.B(grid.t_start, np.zeros(plant.k)))
        P_blk, c = detectability_certificate(Bbar, B)
        if np.linalg.norm(P_blk, 2) > L:
            raise CertificateError(f"|P| = {np.linalg.norm(P_blk, 2):.4g} exceeds L = {L}; raise L")
        d = TimeGridFunction.constant(grid, c)
        block = constant_certificate(P_blk, d, L, 0.5 * eps, causality, window.tau0, provenance="detectability")
    else:
        d = block_kernel_rate(plant, full_box, grid)
        block = constant_certificate(L * np.eye(n2), d, L, 0.5 * eps, causality, window.tau0,
                                     provenance="block")
    ys = tape.read_many(grid.nodes if mode == "causal" else np.maximum(grid.nodes - window.tau0, grid.t_start),
                        grid.nodes)
    a_vals = np.array([st.a(t, y) for t, y in zip(grid.nodes, ys)], dtype=float)
    a_fn = TimeGridFunction(grid, a_vals, 0.0)
    B_fn = np.atleast_2d(st.B(grid.t_start, ys[0]))
    lifted = lift_composite(block, block_template(plant), a_fn, B_fn, full_box, eps - block.eps, window, mode,
                            tape, sphere_level, n1)
    return lifted.full, [block, lifted]
