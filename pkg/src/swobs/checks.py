"""Oracle checks behind ``swobs verify``.

Each check returns ``{"name", "passed", "detail"}``. The quick level uses
coarse grids; the full level adds the composite lift and triangular chain.
"""
from __future__ import annotations

import math

import numpy as np

from .certificates import (
    Certificate,
    constant_certificate,
    fact_I_schedule,
    fact_II_completion,
)
from .factorization import FactorizationTemplate, BoxValuedMap, composite_box, composite_template, \
    mean_value_check, triangular_box, triangular_template
from .gain_synthesis import omega, shifted_rate
from .model import CausalityWindow, OutputTape, builtin_example, simulate_plant
from .numerics import TimeGrid, TimeGridFunction, integrate_ode, integrate_trapezoid, unit_sphere_samples
from .observer_runtime import next_switch_time, saturation_factor

__all__ = ["run_all", "rk4_order", "omega_two_state"]


def _result(name, passed, detail=""):
    return {"name": name, "passed": bool(passed), "detail": detail}


def rk4_order(dt: float = 0.05) -> float:
    """Observed order of RK4 on ``x' = x cos t`` (max error on [0, 4]) from ``dt`` and ``dt / 2``."""
    errs = []
    for h in (dt, dt / 2):
        g = TimeGrid.from_span(0.0, 4.0, h)
        sol = integrate_ode(lambda t, x: x * math.cos(t), np.array([1.0]), g)
        errs.append(np.max(np.abs(sol.values[:, 0] - np.exp(np.sin(g.nodes)))))
    return math.log2(errs[0] / errs[1])


def omega_two_state(level: int = 90) -> float:
    """Sampled margin for ``P = I``, ``A = [[0,1],[0,-1]]``, ``H = (1, 0)``, ``dbar = 0``."""
    g = TimeGrid(0.0, 1.0, 2)
    cert = Certificate(TimeGridFunction.constant(g, np.eye(2)), TimeGridFunction.constant(g, np.zeros((2, 2))),
                       TimeGridFunction.constant(g, 0.0), 2.0, 0.1, "causal", 0.0)
    base = np.array([[0.0, 1.0], [0.0, -1.0]])
    template = FactorizationTemplate("dense", 2, (), lambda t, y: base)
    empty = TimeGridFunction(g, np.zeros((2, 0)))
    box = BoxValuedMap(empty, empty)
    tape = OutputTape(TimeGridFunction.constant(g, np.zeros(1)), 0.0)
    return omega(0.0, cert, box, template, np.array([[1.0, 0.0]]), 0.0, unit_sphere_samples(2, level), tape)


def _check_rk4():
    p = rk4_order()
    return _result("rk4_order", p >= 3.8, f"observed order {p:.3f}")


def _check_trapezoid():
    g = TimeGrid.from_span(0.0, 1.0, 0.01)
    lin = integrate_trapezoid(TimeGridFunction(g, 2 * g.nodes + 1), 0.0, 1.0)
    quad = integrate_trapezoid(TimeGridFunction(g, g.nodes**2), 0.0, 1.0)
    ok = abs(lin - 2.0) < 1e-12 and abs((quad - 1 / 3) - g.dt**2 / 6) < 1e-12
    return _result("trapezoid_closed_form", ok, f"linear {lin:.15g}, quadratic error {quad - 1 / 3:.3e}")


def _check_omega(level):
    w = omega_two_state(level)
    return _result("omega_analytic", abs(w - math.sqrt(0.5)) < 1e-3, f"omega {w:.6f} vs {math.sqrt(0.5):.6f}")


def _check_switch():
    g = TimeGrid.from_span(0.0, 10.0, 1e-3)
    dbar = TimeGridFunction.constant(g, 1.0)
    T, trunc = next_switch_time(dbar, lambda t, t0, r: math.sqrt(2.0) * r, 4.0, 1, 0.0, 0.0)
    expect = max(1.0, math.log(2 * math.sqrt(2.0) * 2 * 2))
    return _result("switch_time_closed_form", not trunc and abs(T - expect) <= g.dt,
                   f"T = {T:.4f}, closed form {expect:.4f}")


def _check_shifted_rate():
    g = TimeGrid.from_span(0.0, 2.0, 1e-3)
    cert = constant_certificate(np.eye(1) * 2, TimeGridFunction.constant(g, 0.1), 2.0, 0.1)
    d = shifted_rate(cert, 0.6)
    v = float(d.values[0])
    return _result("shifted_rate_value", abs(v - (0.1 - 1 / math.pi)) < 1e-12, f"dbar(t0) = {v:.6f}")


def _check_saturation():
    ok = (saturation_factor(np.zeros(2), 1.0) == 1.0 and abs(saturation_factor(np.array([1.5, 0.0]), 1.0) - 0.5) < 1e-15
          and saturation_factor(np.array([2.0, 0.0]), 1.0) == 0.0)
    return _result("saturation_zones", ok)


def _check_gates():
    g = TimeGrid.from_span(0.0, 2.0, 1e-2)
    good = constant_certificate(2 * np.eye(2), TimeGridFunction.constant(g, 0.0), 2.0, 0.1)
    bad = Certificate(TimeGridFunction.constant(g, 0.5 * np.eye(2)), good.Pdot, good.d, 2.0, 0.1, "causal", 0.0)
    ok = good.gates().passed and not bad.gates().passed and not bad.gates().checks["psd"]["passed"]
    return _result("certificate_gates", ok, "constant passes, P = 0.5 I rejected")


def _check_fact_I(level):
    g = TimeGrid.from_span(0.0, 1.0, 1e-3)
    one = TimeGridFunction.constant(g, 1.0)
    out = []
    for label, theta, eps in (("unit", one, 0.1), ("ramp_theta", TimeGridFunction(g, g.nodes.copy()), 0.05)):
        s = fact_I_schedule(one, one, theta, eps, CausalityWindow.noncausal(0.5))
        ok = (s.ell.values[0] == 0.0 and np.all(s.ell.values * theta.values <= one.values + 1e-12)
              and s.integral < eps)
        out.append(f"{label}: int h = {s.integral:.3g}")
        if not ok:
            return _result("fact_I_schedule", False, "; ".join(out))
    return _result("fact_I_schedule", True, "; ".join(out))


def _check_fact_II():
    g = TimeGrid.from_span(0.0, 1.0, 1e-2)
    blk = constant_certificate(np.array([[2.0]]), TimeGridFunction.constant(g, 0.0), 3.0, 0.1)
    S = TimeGridFunction(g, (0.1 * g.nodes)[:, None, None])
    T, rep = fact_II_completion(S, blk, 3.0)
    det = (T.values[:, 0, 0] - 1.0) * 1.0 - (0.1 * g.nodes) ** 2
    ok = np.all(det > 0) and abs(T.values[0, 0, 0] - 3.0) < 1e-12 and np.allclose(det, 2.0, rtol=1e-8)
    return _result("fact_II_small", ok, f"min det {det.min():.6g}")


def _check_mean_value(trials):
    out = []
    for name, tmpl_fn, box_fn in (("ex3_1", composite_template, composite_box), ("ex4_1", triangular_template,
                                                                              triangular_box)):
        plant = builtin_example(name)
        g = TimeGrid.from_span(0.0, 2.0, 1e-2)
        R, xi = 1.0, 1.0
        rep = mean_value_check(plant, tmpl_fn(plant), box_fn(plant, R, 0.0, xi, g), trials, xi, R,
                               raise_on_violation=False)
        out.append(f"{name}: {rep.violations} violations in {rep.trials}")
        if rep.violations:
            return _result("mean_value_factorization", False, "; ".join(out))
    return _result("mean_value_factorization", True, "; ".join(out))


def _check_composite_lift():
    from .providers import make_providers

    plant = builtin_example("ex3_1")
    g = TimeGrid.from_span(0.0, 4.0, 1e-3)
    w = CausalityWindow.noncausal(0.5)
    _, tape = simulate_plant(plant, 0.0, [0.5, 1.0, -1.0], g, "noncausal", 0.5)
    records = {}
    cp, gp = make_providers(plant, "composite_lift", {}, 2.0, "noncausal", w, tape, 0.0, records=records)
    xi = plant.beta(0, 0, 1) * math.sqrt(2) * math.exp(0.2)
    cert, box, tmpl = cp(1, 0.0, xi, 0.1, g)
    gain = gp(cert, box, tmpl, 0.2, g)
    comp = records[1].stages[1].report["completion"]
    ok = (cert.gates().passed and all(np.isfinite(v) for v in comp["min_log_det"])
          and abs(comp["tau_at_start"][0] - 2.0) < 1e-12 and gain.verification["max_excess"] <= 1e-7)
    return _result("composite_lift_fact_II", ok, f"min log det {comp['min_log_det']}, phi max {gain.phi.values.max():.3g}")


def _check_chain():
    from .certificates import triangular_chain

    plant = builtin_example("ex4_1")
    g = TimeGrid.from_span(0.0, 2.0, 1e-3)
    w = CausalityWindow.noncausal(0.5)
    _, tape = simulate_plant(plant, 0.0, [0.5, -0.5, 0.5], g, "noncausal", 0.5)
    xi = plant.beta(0, 0, 1) * math.sqrt(2) * math.exp(0.2)
    cert, stages = triangular_chain(plant, 1.0, 0.0, 0.0, xi, 2.0, 0.1, w, "noncausal", tape, g)
    ok = cert.gates().passed
    det_ok = all(all(np.isfinite(v) for v in s.report["completion"]["min_log_det"]) for s in stages[1:])
    budget = [float((s.full if hasattr(s, "full") else s).d_integral().min()) for s in stages]
    bud_ok = all(b > -(k + 1) * 0.1 / 3 for k, b in enumerate(budget))
    return _result("triangular_chain_stages", ok and det_ok and bud_ok,
                   f"stage minimum integrals {['%.4f' % b for b in budget]}")


def run_all(level: str = "quick") -> list:
    full = level == "full"
    results = [
        _check_rk4(),
        _check_trapezoid(),
        _check_omega(90 if full else 30),
        _check_switch(),
        _check_shifted_rate(),
        _check_saturation(),
        _check_gates(),
        _check_fact_I(level),
        _check_fact_II(),
        _check_mean_value(500 if full else 50),
    ]
    if full:
        results += [_check_composite_lift(), _check_chain()]
    return results
