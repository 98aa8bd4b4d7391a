import math

import numpy as np
import pytest

from swobs.certificates import constant_certificate
from swobs.gain_synthesis import GainProfile
from swobs.model import CausalityWindow, OutputTape, PlantModel, builtin_example, simulate_plant
from swobs.numerics import TimeGrid, TimeGridFunction
from swobs.observer_runtime import (
    horizon_observer,
    next_switch_time,
    run_switching_observer,
    saturation_factor,
    segment_dynamics,
)
from swobs.providers import make_providers


def _decay_plant():
    return PlantModel(n=1, k=1, F=lambda t, x, y: -x, H=lambda t: np.eye(1),
                      beta=lambda t, t0, r: r, in_M=lambda x: True, name="decay",
                      jac=lambda t, x, y: -np.eye(1))


def _const(g, v):
    return TimeGridFunction.constant(g, v)


def _scalar_setup(dt=1e-3, T=4.0, mode="causal"):
    g = TimeGrid.from_span(0.0, T, dt)
    plant = _decay_plant()
    _, tape = simulate_plant(plant, 0.0, [1.0], g, mode, 0.0 if mode == "causal" else 0.5)
    cert = constant_certificate(2 * np.eye(1), _const(g, 0.5), 2.0, 0.1)
    gain = GainProfile(_const(g, 1.0), _const(g, 0.5), 0.2, _const(g, math.inf), _const(g, 0.0),
                       _const(g, 0.0), 0.0)
    return plant, cert, gain, tape, g


# --- horizon observer ----------------------------------------------------------

@pytest.mark.parametrize("method", ["rk4", "exprb"])
def test_scalar_error_decays_at_closed_form_rate(method):
    # e' = -(1 + phi / P) e = -1.5 e
    plant, cert, gain, tape, g = _scalar_setup()
    traj = horizon_observer(plant, cert, gain, 0.0, [0.0], g, tape, method=method)
    err = np.exp(-g.nodes) - traj.z.values[:, 0]
    assert np.allclose(err, np.exp(-1.5 * g.nodes), atol=1e-9)
    assert traj.method == method


@pytest.mark.parametrize("mode", ["causal", "noncausal"])
def test_stiff_gain_uses_exponential_step(mode):
    plant, cert, _, tape, g = _scalar_setup(mode=mode)
    big = GainProfile(_const(g, 1e4), _const(g, 0.5), 0.2, _const(g, math.inf), _const(g, 0.0),
                      _const(g, 0.0), 0.0)
    traj = horizon_observer(plant, cert, big, 0.0, [0.0], g, tape)
    assert traj.method == "exprb"
    exact = np.exp(-g.nodes) - np.exp(-5001.0 * g.nodes)
    err = np.abs(traj.z.values[:, 0] - exact)
    if mode == "noncausal":
        assert err.max() < 1e-6
    else:
        # the backward stencil extrapolates y over the first cells
        assert err[:3].max() < 1e-3 and err[10:].max() < 1e-6


def test_observer_started_on_the_state_stays_on_it():
    plant, cert, gain, tape, g = _scalar_setup()
    traj = horizon_observer(plant, cert, gain, 0.0, [1.0], g, tape, method="rk4")
    assert np.allclose(traj.z.values[:, 0], np.exp(-g.nodes), atol=1e-10)
    assert traj.flagged_initial_state


def test_observer_grid_must_start_at_initial_time():
    plant, cert, gain, tape, g = _scalar_setup()
    with pytest.raises(ValueError):
        horizon_observer(plant, cert, gain, 0.5, [0.0], g, tape)


def test_exprb_needs_jacobian():
    plant, cert, gain, tape, g = _scalar_setup()
    nojac = PlantModel(1, 1, plant.F, plant.H, plant.beta, plant.in_M, "decay")
    with pytest.raises(ValueError):
        horizon_observer(nojac, cert, gain, 0.0, [0.0], g, tape, method="exprb")


def test_auto_picks_rk4_for_mild_gain():
    plant, cert, gain, tape, g = _scalar_setup()
    assert horizon_observer(plant, cert, gain, 0.0, [0.0], g, tape).method == "rk4"


# --- saturation ------------------------------------------------------------------

def test_saturation_zones():
    assert saturation_factor([0.3, 0.4], 1.0) == 1.0
    assert saturation_factor([0.6, 0.8], 1.0) == 1.0
    assert saturation_factor([1.5, 0.0], 1.0) == pytest.approx(0.5)
    assert saturation_factor([2.0, 0.0], 1.0) == 0.0
    assert saturation_factor([5.0, 0.0], 1.0) == 0.0
    with pytest.raises(ValueError):
        saturation_factor([0.0], 0.0)


def test_segment_dynamics_vanishes_beyond_twice_zeta():
    fld = segment_dynamics(3, lambda t, z, y: np.ones_like(z), 0.5)
    assert (fld.segment, fld.zeta) == (3, 0.5)
    assert np.array_equal(fld(0.0, np.array([1.0, 0.0]), None), [0.0, 0.0])
    assert np.array_equal(fld(0.0, np.array([0.1, 0.0]), None), [1.0, 1.0])
    assert np.allclose(fld(0.0, np.array([0.75, 0.0]), None), [0.5, 0.5])


# --- switch times ------------------------------------------------------------------

def _beta(t, t0, r):
    return math.sqrt(2.0) * r


def test_switch_time_constant_rate():
    # exp(-t) <= 1 / (sqrt2 * 2 * 2 * 2)
    g = TimeGrid.from_span(0.0, 10.0, 1e-3)
    T, trunc = next_switch_time(_const(g, 1.0), _beta, 4.0, 1, 0.0, 0.0)
    assert not trunc
    assert abs(T - max(1.0, math.log(8 * math.sqrt(2)))) <= g.dt


def test_switch_time_from_offset():
    g = TimeGrid.from_span(0.0, 10.0, 1e-3)
    T, _ = next_switch_time(_const(g, 1.0), _beta, 4.0, 1, 3.0, 0.0)
    assert abs(T - (3.0 + math.log(8 * math.sqrt(2)))) <= g.dt


def test_switch_time_zero_rate_truncates():
    g = TimeGrid.from_span(0.0, 10.0, 1e-3)
    T, trunc = next_switch_time(_const(g, 0.0), _beta, 4.0, 1, 0.0, 0.0)
    assert trunc and T == pytest.approx(10.0)


def test_switch_time_fast_rate_waits_one_unit():
    g = TimeGrid.from_span(0.0, 10.0, 1e-3)
    T, trunc = next_switch_time(_const(g, 100.0), _beta, 4.0, 2, 2.5, 0.0)
    assert not trunc and T == pytest.approx(3.5)


# --- switching runs ------------------------------------------------------------------

def _linear_run(mode, t_end=12.0, dt=1e-2, x0=(0.5, 1.0, -1.0)):
    plant = builtin_example("linear_detectable")
    g = TimeGrid.from_span(0.0, t_end, dt)
    window = CausalityWindow.causal() if mode == "causal" else CausalityWindow.noncausal(0.5)
    traj, tape = simulate_plant(plant, 0.0, x0, g, mode, window.tau)
    cp, gp = make_providers(plant, "detectability", {}, 2.0, mode, window, tape, 0.0)
    est = run_switching_observer(plant, cp, gp, 0.0, x0, g, mode, tape, x_true=traj.values)
    return est, tape, window


@pytest.fixture(scope="module")
def noncausal_run():
    return _linear_run("noncausal")


@pytest.fixture(scope="module")
def causal_run():
    return _linear_run("causal")


def test_schedule_gaps_and_segment_count(noncausal_run):
    est, _, _ = noncausal_run
    t = est.schedule.t
    assert np.all(np.diff(t[1:]) >= 1.0 - 1e-9)
    assert len(est.segments) >= 3 or est.schedule.horizon_truncated
    assert est.report["m0"] == 2


def test_segment_bounds_hold(noncausal_run):
    est, _, _ = noncausal_run
    for k, chk in est.report["segments"].items():
        if chk["applies"]:
            assert chk["error_bound"]["passed"], (k, chk["error_bound"])
            assert chk["saturation_inactive"]["passed"], (k, chk["saturation_inactive"])
            if chk["completed"]:
                assert chk["tail_bound"]["passed"]


def test_stitched_estimate_layout(noncausal_run):
    est, _, _ = noncausal_run
    t = est.schedule.t
    nodes = est.grid.nodes
    for k, seg in est.segments.items():
        if not seg.completed:
            continue
        inside = (nodes >= t[k - 1] - 1e-9) & (nodes < t[k] - 1e-9)
        assert np.all(est.segment_index[inside] == k)
    assert np.all(est.sat_factor[est.segment_index > 0] == 1.0)


def test_noncausal_lookahead_within_window(noncausal_run):
    _, tape, window = noncausal_run
    assert tape.max_lookahead() <= window.tau + 1e-12


def test_causal_run_reads_no_future(causal_run):
    est, tape, _ = causal_run
    assert tape.future_reads() == 0
    assert est.report["m0"] == 2


def test_non_natural_initial_norm_sets_m0():
    est, _, _ = _linear_run("noncausal", t_end=4.0, x0=(2.5, 0.0, 0.0))
    assert est.report["m0"] == 3
