import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from swobs.certificates import (
    Certificate,
    CertificateError,
    ScheduleInfeasible,
    causal_schedule,
    certificate_from_json,
    certificate_to_json,
    constant_certificate,
    detectability_certificate,
    fact_I_schedule,
    fact_II_completion,
    kernel_inequality_check,
    lift_composite,
    psd_margin,
    triangular_chain,
)
from swobs.gain_synthesis import shifted_rate
from swobs.factorization import block_template, composite_box, triangular_box, triangular_template
from swobs.model import CausalityWindow, OutputTape, builtin_example, sigma22_closed_form, simulate_plant
from swobs.numerics import TimeGrid, TimeGridFunction, cumulative_trapezoid, integrate_trapezoid
from swobs.providers import block_kernel_rate, make_providers

W = CausalityWindow.noncausal(0.5)


def _const(grid, v):
    return TimeGridFunction.constant(grid, v)


# --- constant and detectability ------------------------------------------------

def test_constant_certificate_gates_pass():
    g = TimeGrid.from_span(0.0, 5.0, 0.01)
    cert = constant_certificate(2 * np.eye(2), _const(g, 1.0), 2.0, 0.1)
    rep = cert.gates()
    assert rep.passed and rep.checks["divergence_proxy"]["passed"]
    assert np.all(cert.Pdot.values == 0.0)


def test_zero_rate_is_valid_but_flagged():
    g = TimeGrid.from_span(0.0, 5.0, 0.01)
    rep = constant_certificate(np.eye(2), _const(g, 0.0), 2.0, 0.1).gates()
    assert rep.passed
    assert not rep.checks["divergence_proxy"]["passed"]
    assert rep.failures() == ["divergence_proxy"]


def test_constant_certificate_rejects_bad_input():
    g = TimeGrid.from_span(0.0, 1.0, 0.1)
    with pytest.raises(CertificateError):
        constant_certificate(0.5 * np.eye(2), _const(g, 0.0), 2.0, 0.1)
    with pytest.raises(CertificateError):
        constant_certificate(3 * np.eye(2), _const(g, 0.0), 2.0, 0.1)
    with pytest.raises(CertificateError):
        constant_certificate(np.eye(2), _const(g, 0.0), 1.0, 0.1)


def test_corrupted_certificate_fails_psd_gate():
    g = TimeGrid.from_span(0.0, 1.0, 0.1)
    good = constant_certificate(2 * np.eye(2), _const(g, 0.0), 2.0, 0.1)
    bad = Certificate(_const(g, 0.5 * np.eye(2)), good.Pdot, good.d, 2.0, 0.1)
    assert bad.gates().failures()[0] == "psd"
    with pytest.raises(CertificateError):
        bad.assert_gates()


def test_budget_gate_catches_negative_rate():
    g = TimeGrid.from_span(0.0, 1.0, 0.01)
    rep = constant_certificate(np.eye(1) * 2, _const(g, -0.2), 2.0, 0.1).gates()
    assert not rep.checks["budget"]["passed"]


def test_scaled_psd_route_for_large_matrices():
    rng = np.random.default_rng(1)
    C = rng.standard_normal((3, 3))
    D = np.diag([1e12, 1e4, 1.0])
    Q = np.linalg.qr(rng.standard_normal((3, 3)))[0]
    M = Q @ D @ (C @ C.T + 0.1 * np.eye(3)) @ D @ Q.T
    assert np.linalg.eigvalsh(M)[0] < -1e-9  # roundoff at this norm
    lam, route = psd_margin(M[None])
    assert lam[0] >= -1e-9 and route[0]
    lam, route = psd_margin(np.diag([1e12, -1.0])[None])
    assert lam[0] == pytest.approx(-1.0) and not route[0]


def test_ex3_1_closed_form_rate():
    assert -sigma22_closed_form(0.0, 1.0, 1.0) == pytest.approx(0.1)


def test_ex3_1_block_rate_satisfies_kernel_inequality():
    plant = builtin_example("ex3_1")
    g = TimeGrid.from_span(0.0, 10.0, 0.1)
    box = composite_box(plant, 1.0, 0.0, 1.0, g)
    d = block_kernel_rate(plant, box, g)
    L = 2.0
    q4_hi = box.upper.values[:, 3]
    assert g.count >= 100
    assert np.all(L * (q4_hi + d.values) <= 1e-15)
    # the ball bound is the more conservative bracket
    assert d.values[0] <= -sigma22_closed_form(0.0, 1.0, 1.0)


def test_detectability_stable_diagonal():
    P, c = detectability_certificate(-np.eye(2), [[1.0, 0.0]])
    K = np.array([[0.0], [1.0]])
    assert np.linalg.eigvalsh(P - np.eye(2))[0] > 0
    assert c == pytest.approx(1.0)
    assert (K.T @ P @ -np.eye(2) @ K)[0, 0] <= -c * (K.T @ P @ K)[0, 0] + 1e-12


def test_detectability_rate_two():
    P, c = detectability_certificate(np.diag([-1.0, -2.0]), [[1.0, 0.0]])
    assert c == pytest.approx(2.0)


def test_detectability_nilpotent_infeasible():
    with pytest.raises(CertificateError):
        detectability_certificate([[0.0, 1.0], [0.0, 0.0]], [[1.0, 0.0]])


# --- threshold ramps and the causal schedule ------------------------------------

def _check_fact_I(phi, zeta, theta, eps, s):
    g = phi.grid
    ell, h = s.ell.values, s.h.values
    assert ell[0] == 0.0
    assert np.all((phi.values - ell * theta.values) * zeta.values <= h + 1e-12)
    assert np.all(h >= 0.0)
    assert integrate_trapezoid(s.h, g.t_start, g.t_end) < eps
    assert s.integral < eps


def test_fact_I_unit_inputs():
    g = TimeGrid.from_span(0.0, 1.0, 1e-3)
    one = _const(g, 1.0)
    s = fact_I_schedule(one, one, one, 0.1, W)
    _check_fact_I(one, one, one, 0.1, s)
    assert s.ramp_time <= 0.1
    assert s.integral == pytest.approx(s.ramp_time / 2, rel=1e-3)
    assert np.allclose(s.ell.values[g.nodes >= s.ramp_time + 1e-12], 1.0)


def test_fact_I_zero_zeta():
    g = TimeGrid.from_span(0.0, 1.0, 1e-3)
    one = _const(g, 1.0)
    s = fact_I_schedule(one, _const(g, 0.0), one, 0.1, W)
    assert np.all(s.h.values == 0.0) and s.integral == 0.0


def test_fact_I_theta_vanishing_at_start():
    g = TimeGrid.from_span(0.0, 1.0, 1e-3)
    one = _const(g, 1.0)
    theta = TimeGridFunction(g, g.nodes.copy())
    s = fact_I_schedule(one, one, theta, 0.05, W)
    _check_fact_I(one, one, theta, 0.05, s)


def test_fact_I_rejects_vanishing_theta():
    g = TimeGrid.from_span(0.0, 1.0, 1e-2)
    one = _const(g, 1.0)
    with pytest.raises(ScheduleInfeasible):
        fact_I_schedule(one, one, _const(g, 0.0), 0.1, W)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 50.0), st.floats(0.0, 5.0), st.floats(0.05, 5.0), st.floats(1e-3, 0.5))
def test_fact_I_property(phi0, zeta0, theta0, eps):
    g = TimeGrid.from_span(0.0, 2.0, 1e-2)
    nodes = g.nodes
    phi = TimeGridFunction(g, phi0 * (1 + 0.5 * np.sin(3 * nodes)))
    zeta = TimeGridFunction(g, zeta0 * (1 + nodes))
    theta = TimeGridFunction(g, theta0 * (1.1 + np.cos(2 * nodes)))
    _check_fact_I(phi, zeta, theta, eps, fact_I_schedule(phi, zeta, theta, eps, W))


def test_causal_schedule_unit_case():
    g = TimeGrid.from_span(0.0, 1.0, 1e-3)
    one = _const(g, 1.0)
    s = causal_schedule(one, one, one, _const(g, 0.2), 0.2)
    assert s.delta == pytest.approx(0.1)
    assert s.ramp_time == pytest.approx(0.05, abs=1e-12)
    after = g.nodes >= 0.05 + 1e-12
    assert np.allclose(s.dbar.values[after], 0.2)
    assert s.ell.values[0] == 0.0
    # loss over the ramp is half the ramp length for the smoothstep
    assert s.integral == pytest.approx(0.025, rel=1e-6)


def test_causal_schedule_zero_coupling():
    g = TimeGrid.from_span(0.0, 1.0, 1e-2)
    one = _const(g, 1.0)
    dhat = TimeGridFunction(g, 0.3 + 0.1 * g.nodes)
    s = causal_schedule(one, one, _const(g, 0.0), dhat, 0.2)
    assert np.array_equal(s.dbar.values, dhat.values)


def test_causal_schedule_rejects_vanishing_a():
    g = TimeGrid.from_span(0.0, 1.0, 1e-2)
    one = _const(g, 1.0)
    with pytest.raises(ScheduleInfeasible):
        causal_schedule(one, TimeGridFunction(g, g.nodes - 0.5), one, one, 0.2)


# --- completion ------------------------------------------------------------------

def test_fact_II_zero_border():
    g = TimeGrid.from_span(0.0, 1.0, 0.1)
    blk = constant_certificate(2 * np.eye(2), _const(g, 0.0), 3.0, 0.1)
    T, rep = fact_II_completion(TimeGridFunction(g, np.zeros((g.count, 1, 2))), blk, 3.0)
    assert np.allclose(T.values, 3.0)
    assert rep.tau_at_start == [3.0] and rep.K_at_start == [0.0]


def test_fact_II_two_by_two_determinant():
    g = TimeGrid.from_span(0.0, 1.0, 1e-2)
    blk = constant_certificate(np.array([[2.0]]), _const(g, 0.0), 3.0, 0.1)
    s = 0.1 * g.nodes
    T, rep = fact_II_completion(TimeGridFunction(g, s[:, None, None]), blk, 3.0)
    det = (T.values[:, 0, 0] - 1.0) * 1.0 - s**2
    assert np.all(det > 0)
    assert np.allclose(det, 2.0, rtol=1e-8)
    assert T.values[0, 0, 0] == 3.0


def test_fact_II_rejects_nonzero_start():
    g = TimeGrid.from_span(0.0, 1.0, 0.1)
    blk = constant_certificate(np.array([[2.0]]), _const(g, 0.0), 3.0, 0.1)
    with pytest.raises(CertificateError):
        fact_II_completion(TimeGridFunction(g, np.ones((g.count, 1, 1))), blk, 3.0)


def test_fact_II_inflates_singular_block():
    g = TimeGrid.from_span(0.0, 1.0, 0.1)
    blk = constant_certificate(np.eye(1), _const(g, 0.0), 3.0, 0.1)
    _, rep = fact_II_completion(TimeGridFunction(g, np.zeros((g.count, 1, 1))), blk, 3.0)
    assert rep.inflated


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31 - 1), st.floats(1.5, 5.0))
def test_fact_II_determinants_positive(n1, n2, seed, L):
    rng = np.random.default_rng(seed)
    g = TimeGrid.from_span(0.0, 1.0, 0.05)
    C = 0.5 * rng.standard_normal((n2, n2))
    P0 = (1 + 1e-3) * np.eye(n2) + C @ C.T
    blk = constant_certificate(P0, _const(g, 0.0), max(L, np.linalg.norm(P0, 2) + 0.1), 0.1)
    S = (g.nodes[:, None, None] * rng.standard_normal((1, n1, n2)) * 5.0)
    T, rep = fact_II_completion(TimeGridFunction(g, S), blk, L)
    for lg in rep.log_det:
        assert np.all(np.isfinite(lg))
    assert np.allclose(T.values[0], L * np.eye(n1))
    full = np.block([[T.values[-1], S[-1]], [S[-1].T, P0]])
    assert psd_margin((full - np.eye(n1 + n2))[None])[0][0] >= -1e-9


# --- kernel inequality -------------------------------------------------------------

def test_kernel_inequality_check_detects_violation():
    g = TimeGrid.from_span(0.0, 1.0, 0.5)
    N = g.count
    P = np.broadcast_to(np.eye(2), (N, 2, 2)).copy()
    zero = np.zeros((N, 2, 2))
    base = np.broadcast_to(-np.eye(2), (N, 2, 2)).copy()
    K = np.array([[0.0], [1.0]])
    empty = np.zeros((N, 0))
    ok = kernel_inequality_check(P, zero, np.full(N, 0.5), base, empty, empty, [], [], K)
    bad = kernel_inequality_check(P, zero, np.full(N, 1.5), base, empty, empty, [], [], K)
    assert ok["passed"] and ok["max_form"] == pytest.approx(-0.5)
    assert not bad["passed"] and bad["max_form"] == pytest.approx(0.5)


# --- composite lift and chain -------------------------------------------------------

@pytest.fixture(scope="module")
def ex3_1_lift():
    plant = builtin_example("ex3_1")
    g = TimeGrid.from_span(0.0, 2.0, 2e-3)
    _, tape = simulate_plant(plant, 0.0, [0.5, 1.0, -1.0], g, "noncausal", 0.5)
    records = {}
    cp, gp = make_providers(plant, "composite_lift", {}, 2.0, "noncausal", W, tape, 0.0, records=records)
    xi = plant.beta(0, 0, 1) * math.sqrt(2) * math.exp(0.2)
    cert, box, tmpl = cp(1, 0.0, xi, 0.1, g)
    return cert, records[1], tape


def test_lift_gates_and_initial_norm(ex3_1_lift):
    cert, rec, _ = ex3_1_lift
    assert cert.dim == 3 and cert.gates().passed
    assert np.linalg.norm(cert.P.values[0], 2) == pytest.approx(2.0, abs=1e-9)


def test_lift_completion_report(ex3_1_lift):
    _, rec, _ = ex3_1_lift
    lifted = rec.stages[1]
    comp = lifted.report["completion"]
    assert comp["tau_at_start"] == [2.0]
    assert all(np.isfinite(v) for v in comp["min_log_det"])
    assert lifted.report["kernel"]["passed"]


def test_lift_budget(ex3_1_lift):
    cert, rec, _ = ex3_1_lift
    block = rec.stages[0]
    assert np.all(cert.d_integral() > -(block.eps + rec.stages[1].full.eps - block.eps))
    assert cert.eps == pytest.approx(0.1)


def test_lift_lookahead_within_window(ex3_1_lift):
    cert, rec, tape = ex3_1_lift
    assert cert.d.lookahead_used <= W.tau + 1e-12
    assert tape.max_lookahead() <= W.tau + 1e-12


def test_lift_with_zero_border_is_block_diagonal():
    g = TimeGrid.from_span(0.0, 1.0, 1e-2)
    plant = builtin_example("linear_detectable")
    tape = OutputTape(TimeGridFunction(g, np.zeros((g.count, 1))), 0.0, "noncausal", 0.5)
    box = composite_box(plant, 1.0, 0.0, 1.0, g)
    block = constant_certificate(2 * np.eye(2), _const(g, 0.5), 2.0, 0.05, "noncausal", 0.25)
    lifted = lift_composite(block, block_template(plant), _const(g, 1.0), np.zeros((1, 2)), box, 0.05,
                            W, "noncausal", tape, 30)
    assert np.allclose(lifted.S.values, 0.0)
    assert np.allclose(lifted.full.P.values[:, 0, 0], 2.0)
    assert np.array_equal(lifted.dbar.values, shifted_rate(block, block.eps + 0.025).values)
    assert np.all(lifted.h.values == 0.0)


def test_chain_single_state():
    from swobs.model import PlantModel, TriangularStructure

    plant = PlantModel(
        n=1, k=1, F=lambda t, x, y: -x, H=lambda t: np.eye(1), beta=lambda t, t0, r: r,
        in_M=lambda x: True, name="scalar", jac=lambda t, x, y: -np.eye(1),
        structure=TriangularStructure(a_funcs=lambda t, y: np.zeros(0),
                                      partial_bounds=lambda t, r: (np.zeros(np.shape(r) + (1, 1)),) * 2),
    )
    g = TimeGrid.from_span(0.0, 2.0, 0.01)
    tape = OutputTape(TimeGridFunction(g, np.zeros((g.count, 1))), 0.0, "noncausal", 0.5)
    cert, stages = triangular_chain(plant, 1.0, 0.0, 0.0, 1.0, 2.0, 0.3, W, "noncausal", tape, g)
    assert len(stages) == 1 and cert.dim == 1
    assert np.allclose(cert.P.values, 2.0)
    assert np.allclose(cert.d.values, 1.0 / (1.0 + g.nodes))


@pytest.fixture(scope="module")
def ex4_1_chain():
    plant = builtin_example("ex4_1")
    g = TimeGrid.from_span(0.0, 2.0, 1e-3)
    _, tape = simulate_plant(plant, 0.0, [0.5, -0.5, 0.5], g, "noncausal", 0.5)
    xi = plant.beta(0, 0, 1) * math.sqrt(2) * math.exp(0.2)
    return triangular_chain(plant, 1.0, 0.0, 0.0, xi, 2.0, 0.3, W, "noncausal", tape, g)


def test_chain_stage_budgets(ex4_1_chain):
    cert, stages = ex4_1_chain
    assert len(stages) == 3
    for k, s in enumerate(stages, start=1):
        c = s if isinstance(s, Certificate) else s.full
        assert c.eps == pytest.approx(k * 0.1)
        assert np.all(c.d_integral() > -k * 0.1)
    assert cert.gates().passed


def test_chain_completion_determinants(ex4_1_chain):
    _, stages = ex4_1_chain
    for s in stages[1:]:
        comp = s.report["completion"]
        assert all(np.isfinite(v) for v in comp["min_log_det"])
        assert all(t == 2.0 for t in comp["tau_at_start"])


# --- serialization ---------------------------------------------------------------

def test_certificate_json_round_trip(ex3_1_lift):
    cert, _, _ = ex3_1_lift
    again = certificate_from_json(certificate_to_json(cert))
    assert np.array_equal(again.P.values, cert.P.values)
    assert np.array_equal(again.d.values, cert.d.values)
    assert again.causality == cert.causality and again.L == cert.L
    assert json.loads(certificate_to_json(again)) == json.loads(certificate_to_json(cert))
