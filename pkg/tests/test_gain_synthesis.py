import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from swobs.certificates import Certificate, constant_certificate
from swobs.checks import omega_two_state
from swobs.factorization import BoxValuedMap, FactorizationTemplate, box_vertices
from swobs.gain_synthesis import (
    SynthesisFailed,
    _prepare,
    capacity,
    gain_to_json,
    omega,
    omega_bar,
    shifted_rate,
    synthesize,
)
from swobs.kernels import dissipation_scan
from swobs.model import CausalityWindow, OutputTape, builtin_example, simulate_plant
from swobs.numerics import TimeGrid, TimeGridFunction, integrate_trapezoid, unit_sphere_samples
from swobs.providers import make_providers

W = CausalityWindow.noncausal(0.5)


def _const(grid, v):
    return TimeGridFunction.constant(grid, v)


def _zero_tape(grid, k=1):
    return OutputTape(TimeGridFunction(grid, np.zeros((grid.count, k))), grid.t_start, "noncausal", 0.5)


def _empty_box(grid, dims=0):
    empty = TimeGridFunction(grid, np.zeros((grid.count, dims)))
    return BoxValuedMap(empty, empty)


def _identity_cert(grid, n, d=0.0, eps=0.1):
    return Certificate(_const(grid, np.eye(n)), _const(grid, np.zeros((n, n))), _const(grid, d), 2.0, eps,
                       "noncausal", 0.25)


# --- shifted rate --------------------------------------------------------------

def test_shifted_rate_at_start():
    g = TimeGrid.from_span(0.0, 2.0, 1e-3)
    cert = constant_certificate(2 * np.eye(1), _const(g, 0.1), 2.0, 0.1)
    assert shifted_rate(cert, 0.6).values[0] == pytest.approx(0.1 - 1 / math.pi, abs=1e-12)


def test_shifted_rate_needs_strict_increase():
    g = TimeGrid.from_span(0.0, 1.0, 0.1)
    cert = constant_certificate(2 * np.eye(1), _const(g, 0.1), 2.0, 0.1)
    with pytest.raises(ValueError):
        shifted_rate(cert, 0.1)


def test_shifted_bump_mass():
    g = TimeGrid.from_span(0.0, 200.0, 1e-2)
    cert = constant_certificate(2 * np.eye(1), _const(g, 0.0), 2.0, 0.1)
    d = shifted_rate(cert, 0.6)
    removed = -integrate_trapezoid(d, 0.0, 200.0)
    assert removed == pytest.approx(0.5 * 2 / math.pi * math.atan(200.0), abs=1e-4)
    assert removed < 0.5
    assert np.all(np.cumsum(d.cells()) > -0.6)


# --- omega ---------------------------------------------------------------------

def test_omega_empty_bad_set_is_infinite():
    g = TimeGrid(0.0, 1.0, 2)
    cert = _identity_cert(g, 2)
    tmpl = FactorizationTemplate("dense", 2, (), lambda t, y: np.zeros((2, 2)))
    w = omega(0.0, cert, _empty_box(g), tmpl, np.array([[1.0, 0.0]]), -1.0, unit_sphere_samples(2, 30),
              _zero_tape(g))
    assert w == math.inf


def test_omega_two_state_analytic():
    assert omega_two_state(90) == pytest.approx(math.sqrt(0.5), abs=1e-3)


def test_omega_sampling_converges():
    assert abs(omega_two_state(180) / omega_two_state(90) - 1) < 0.02


def test_omega_zero_for_invalid_certificate():
    g = TimeGrid.from_span(0.0, 1.0, 0.1)
    cert = _identity_cert(g, 2, d=1.0)
    tmpl = FactorizationTemplate("dense", 2, (), lambda t, y: np.eye(2))
    H = np.array([[1.0, 0.0]])
    tape = _zero_tape(g)
    assert omega(0.5, cert, _empty_box(g), tmpl, H, 1.0, unit_sphere_samples(2, 30), tape) == 0.0
    with pytest.raises(SynthesisFailed) as info:
        synthesize(cert, _empty_box(g), tmpl, H, 0.2, W, 30, tape)
    assert info.value.witness["omega"] == 0.0


def test_omega_bar_branches():
    g = TimeGrid.from_span(0.0, 4.0, 0.01)
    assert np.all(omega_bar(_const(g, math.inf), W).values == 0.0)
    assert np.allclose(omega_bar(_const(g, 0.5), W).values, 4.0)
    dip = np.full(g.count, 0.5)
    k = g.index_of(2.0)
    dip[k] = 0.0
    out = omega_bar(TimeGridFunction(g, dip), W).values
    half = W.omega_half_width
    near = np.abs(g.nodes - 2.0) <= half + 1e-9
    assert np.all(out[near] == 0.0)
    assert np.allclose(out[~near], 4.0)


# --- capacity --------------------------------------------------------------------

def _scalar_prep(grid, lo=-1.0, hi=2.0):
    cert = _identity_cert(grid, 1)
    box = BoxValuedMap(_const(grid, [lo]), _const(grid, [hi]))
    tmpl = FactorizationTemplate("dense", 1, ((0, 0),), lambda t, y: np.zeros((1, 1)))
    prep = _prepare(cert, box, tmpl, np.eye(1), np.zeros(grid.count), _zero_tape(grid), 0.0)
    return prep, tmpl, box


def test_capacity_zero_weight():
    g = TimeGrid.from_span(0.0, 1.0, 0.1)
    prep, tmpl, box = _scalar_prep(g)
    assert np.all(capacity(prep, tmpl, box, np.zeros(g.count)) == 0.0)


def test_capacity_vertex_enumeration():
    g = TimeGrid.from_span(0.0, 1.0, 0.1)
    prep, tmpl, box = _scalar_prep(g)
    assert np.allclose(capacity(prep, tmpl, box, np.ones(g.count)), 2.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.0, 100.0), min_size=11, max_size=11))
def test_capacity_linear_in_weight(wbar):
    g = TimeGrid.from_span(0.0, 1.0, 0.1)
    prep, tmpl, box = _scalar_prep(g)
    wbar = np.array(wbar)
    assert np.allclose(capacity(prep, tmpl, box, 2 * wbar), 2 * capacity(prep, tmpl, box, wbar))


# --- vertex sup of the dissipation form ---------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_scan_equals_vertex_max_and_dominates_interior(seed):
    rng = np.random.default_rng(seed)
    n, ell = 3, 4
    positions = [(1, 1), (1, 2), (2, 1), (2, 2)]
    rows = np.array([p[0] for p in positions])
    cols = np.array([p[1] for p in positions])
    C = rng.standard_normal((n, n))
    P = np.eye(n) + C @ C.T
    base = rng.standard_normal((n, n))
    M0 = 0.5 * (P @ base + base.T @ P)
    lo = rng.uniform(-2, 0, ell)
    hi = lo + rng.uniform(0, 2, ell)
    w = rng.standard_normal(n)
    w /= np.linalg.norm(w)

    def form(q):
        A = base.copy()
        for (r, c), v in zip(positions, q):
            A[r, c] += v
        return float(w @ P @ A @ w)

    brute = max(form(v) for v in box_vertices(lo, hi))
    _, worst, _ = dissipation_scan(M0[None], P[None], lo[None], hi[None], rows, cols, np.zeros((1, n, n)),
                                   w[None], np.zeros(1))
    assert worst[0] == pytest.approx(brute, rel=1e-12, abs=1e-12)
    interior = lo + (hi - lo) * rng.random((500, ell))
    assert max(form(q) for q in interior) <= brute + 1e-12


# --- synthesis -----------------------------------------------------------------------

def test_synthesize_trivial_dynamics():
    g = TimeGrid.from_span(0.0, 2.0, 0.01)
    cert = _identity_cert(g, 2, d=0.0, eps=0.05)
    tmpl = FactorizationTemplate("dense", 2, (), lambda t, y: np.zeros((2, 2)))
    gain = synthesize(cert, _empty_box(g), tmpl, np.array([[1.0, 0.0]]), 0.1, W, 30, _zero_tape(g))
    assert np.all(gain.C.values == 0.0)
    assert np.allclose(gain.phi.values, 0.05)
    assert gain.rounds == 0
    assert gain.dbar.lookahead_used == 0.0


@pytest.fixture(scope="module")
def ex3_1_gain():
    plant = builtin_example("ex3_1")
    g = TimeGrid.from_span(0.0, 10.0, 2e-3)
    _, tape = simulate_plant(plant, 0.0, [0.5, 1.0, -1.0], g, "noncausal", 0.5)
    cp, gp = make_providers(plant, "composite_lift", {}, 2.0, "noncausal", W, tape, 0.0)
    xi = plant.beta(0, 0, 1) * math.sqrt(2) * math.exp(0.2)
    cert, box, tmpl = cp(1, 0.0, xi, 0.1, g)
    gain = gp(cert, box, tmpl, 0.2, g)
    return plant, cert, box, tmpl, gain, tape


def test_ex3_1_gain_verified(ex3_1_gain):
    _, _, _, _, gain, _ = ex3_1_gain
    assert gain.verification["max_excess"] <= 1e-7
    assert gain.grid.t_end == pytest.approx(10.0)


def test_ex3_1_gain_reverified_independently(ex3_1_gain):
    plant, cert, box, tmpl, gain, tape = ex3_1_gain
    H = plant.H(0.0)
    sphere = unit_sphere_samples(3, 30).points
    rng = np.random.default_rng(3)
    nodes = rng.choice(cert.grid.count, size=40, replace=False)
    for i in nodes:
        t = cert.grid.nodes[i]
        y = tape.y.values[i]
        P, Pd, d, phi = cert.P.values[i], cert.Pdot.values[i], gain.dbar.values[i], gain.phi.values[i]
        for v in box_vertices(box.lower.values[i], box.upper.values[i]):
            A = tmpl.assemble(t, v, y)
            M = 0.5 * (P @ A + A.T @ P) + 0.5 * Pd + d * P - phi * H.T @ H
            vals = np.einsum("si,ij,sj->s", sphere, M, sphere)
            assert vals.max() <= 1e-7


def test_ex3_1_gain_lookahead(ex3_1_gain):
    _, cert, _, _, gain, tape = ex3_1_gain
    assert gain.phi.lookahead_used <= W.tau + 1e-12
    # the rate shift reads no output: dbar inherits the certificate's lookahead
    assert gain.dbar.lookahead_used == cert.d.lookahead_used <= W.tau + 1e-12
    assert tape.max_lookahead() <= W.tau + 1e-12


def test_gain_json(ex3_1_gain):
    _, _, _, _, gain, _ = ex3_1_gain
    doc = json.loads(gain_to_json(gain))
    assert np.array_equal(doc["phi"], gain.phi.values)
    assert doc["eps_bar"] == 0.2
