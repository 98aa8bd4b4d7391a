"""Experiment configuration, runs, reports and the verification suite."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

import tomli_w

from .certificates import Certificate, certificate_to_json
from .gain_synthesis import gain_to_json
from .model import BUILTIN_EXAMPLES, CausalityWindow, builtin_example, simulate_plant
from .numerics import TimeGrid
from .observer_runtime import run_switching_observer
from .providers import PROVIDERS, make_providers

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "RunReport",
    "parse_config",
    "config_from_dict",
    "config_to_toml",
    "run_experiment",
    "verify_suite",
    "INVARIANTS",
]

# every run report carries exactly these verdicts
INVARIANTS = (
    "schedule_law",
    "saturation_inactive",
    "segment_error_bound",
    "tail_bound",
    "convergence_proxy",
    "mode_soundness",
    "certificate_gates",
    "completion_determinants",
    "stage_budgets",
    "gain_verification",
)


class ConfigError(ValueError):
    """Invalid experiment configuration; ``problems`` lists every issue found."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class ExperimentConfig:
    plant: str
    x0: list
    plant_params: dict = field(default_factory=dict)
    t0: float = 0.0
    t_end: float = 20.0
    dt: float = 1e-3
    mode: str = "noncausal"
    tau: float = 0.5
    provider: str = "composite_lift"
    provider_params: dict = field(default_factory=dict)
    L: float = 2.0
    sphere_level: int = 90
    margin_ratio: float = 0.05
    eps_m: float = 0.1
    max_segments: int = 50
    method: str = "auto"
    output: str = "out"
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "plant": {"name": self.plant, "x0": list(self.x0), "params": dict(self.plant_params)},
            "grid": {"t0": self.t0, "t_end": self.t_end, "dt": self.dt},
            "mode": {"kind": self.mode, "tau": self.tau},
            "certificate": {"provider": self.provider, "L": self.L, "params": dict(self.provider_params)},
            "gain": {"sphere_level": self.sphere_level, "margin_ratio": self.margin_ratio},
            "schedule": {"eps_m": self.eps_m, "max_segments": self.max_segments},
            "observer": {"method": self.method},
            "output": {"directory": self.output},
        }

    @property
    def window(self) -> CausalityWindow:
        return CausalityWindow.causal() if self.mode == "causal" else CausalityWindow.noncausal(self.tau)


@dataclass
class RunReport:
    status: str
    config: dict
    schedule: dict = field(default_factory=dict)
    invariants: dict = field(default_factory=dict)
    error: Optional[dict] = None
    timing: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        # None marks an invariant that does not apply to this provider
        return self.status == "ok" and all(v["passed"] is not False for v in self.invariants.values())

    def to_json(self) -> str:
        # timing is kept out so that reruns are byte-identical
        doc = {k: v for k, v in asdict(self).items() if k != "timing"}
        return json.dumps(doc, indent=1, sort_keys=True, default=_jsonable)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not serializable: {type(o).__name__}")


_SECTIONS = {"seed", "plant", "grid", "mode", "certificate", "gain", "schedule", "observer", "output"}


def config_from_dict(doc: dict) -> ExperimentConfig:
    problems = []
    unknown = set(doc) - _SECTIONS
    if unknown:
        problems.append(f"unknown sections: {sorted(unknown)}")
    plant = doc.get("plant", {})
    name = plant.get("name")
    if name is None:
        problems.append("plant.name is required")
    elif name not in BUILTIN_EXAMPLES:
        problems.append(f"unknown plant {name!r}; known: {sorted(BUILTIN_EXAMPLES)}")
    x0 = plant.get("x0")
    if x0 is None:
        problems.append("plant.x0 is required")
    g = doc.get("grid", {})
    m = doc.get("mode", {})
    c = doc.get("certificate", {})
    gn = doc.get("gain", {})
    s = doc.get("schedule", {})
    cfg = ExperimentConfig(
        plant=name or "",
        x0=[float(v) for v in (x0 or [])],
        plant_params=dict(plant.get("params", {})),
        t0=float(g.get("t0", 0.0)),
        t_end=float(g.get("t_end", 20.0)),
        dt=float(g.get("dt", 1e-3)),
        mode=str(m.get("kind", "noncausal")),
        tau=float(m.get("tau", 0.5)),
        provider=str(c.get("provider", "composite_lift")),
        provider_params=dict(c.get("params", {})),
        L=float(c.get("L", 2.0)),
        sphere_level=int(gn.get("sphere_level", 90)),
        margin_ratio=float(gn.get("margin_ratio", 0.05)),
        eps_m=float(s.get("eps_m", 0.1)),
        max_segments=int(s.get("max_segments", 50)),
        method=str(doc.get("observer", {}).get("method", "auto")),
        output=str(doc.get("output", {}).get("directory", "out")),
        seed=int(doc.get("seed", 0)),
    )
    problems += _validate(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def _validate(cfg: ExperimentConfig) -> list:
    out = []
    if not cfg.dt > 0:
        out.append(f"grid.dt must be positive, got {cfg.dt}")
    if not cfg.t_end > cfg.t0 + 3:
        out.append(f"grid.t_end must exceed t0 + 3, got t0={cfg.t0}, t_end={cfg.t_end}")
    if cfg.mode not in ("causal", "noncausal"):
        out.append(f"mode.kind must be causal or noncausal, got {cfg.mode!r}")
    elif cfg.mode == "noncausal" and not cfg.tau > 0:
        out.append(f"mode.tau must be positive in noncausal mode, got {cfg.tau}")
    if cfg.provider not in PROVIDERS:
        out.append(f"unknown certificate provider {cfg.provider!r}; known: {list(PROVIDERS)}")
    if not cfg.L > 1:
        out.append(f"certificate.L must exceed 1, got {cfg.L}")
    if not cfg.eps_m > 0:
        out.append(f"schedule.eps_m must be positive, got {cfg.eps_m}")
    if cfg.sphere_level < 1:
        out.append(f"gain.sphere_level must be positive, got {cfg.sphere_level}")
    if cfg.method not in ("auto", "rk4", "exprb"):
        out.append(f"observer.method must be auto, rk4 or exprb, got {cfg.method!r}")
    if cfg.plant in BUILTIN_EXAMPLES:
        try:
            plant = builtin_example(cfg.plant, cfg.plant_params)
        except ValueError as exc:
            out.append(f"plant parameters: {exc}")
        else:
            if len(cfg.x0) != plant.n:
                out.append(f"plant.x0 has length {len(cfg.x0)}, {cfg.plant} has {plant.n} states")
            elif not plant.in_M(np.asarray(cfg.x0)):
                out.append(f"plant.x0 = {cfg.x0} is not an admissible initial state")
            if cfg.mode == "causal" and not plant.causal_capable:
                out.append(f"causal mode needs a coefficient a that never vanishes; {cfg.plant} with "
                           f"{cfg.plant_params or 'default parameters'} does not qualify")
    return out


def parse_config(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError([f"TOML syntax: {exc}"]) from exc
    return config_from_dict(doc)


def config_to_toml(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


# ---------------------------------------------------------------------------
# runs


def _verdict(passed, **detail) -> dict:
    return {"passed": passed, **detail}


def _collect_invariants(cfg, plant, est, records, tape, x0) -> dict:
    inv = {}
    sched = est.schedule
    ts = sched.t
    gaps = np.diff(ts[1:])  # t_1 .. t_last
    last_fixed = len(ts) - (1 if sched.horizon_truncated else 0)
    real_gaps = np.diff(ts[1:last_fixed]) if last_fixed > 2 else np.array([])
    inv["schedule_law"] = _verdict(
        bool(np.all(real_gaps >= 1.0 - 1e-9)), min_gap=float(real_gaps.min()) if real_gaps.size else None,
        switch_times=ts, horizon_truncated=sched.horizon_truncated)
    m0 = est.report["m0"]
    checks = est.report["segments"]
    relevant = [c for c in checks.values() if c["applies"]]

    def fold(key):
        vals = [c[key] for c in relevant]
        if not vals:
            return _verdict(False, reason=f"vacuous: no segment with m >= m0 = {m0}")
        bad = [c["m"] for c, v in zip(relevant, vals) if v["passed"] is False]
        return _verdict(not bad, failing_segments=bad, per_segment={c["m"]: v for c, v in zip(relevant, vals)})

    inv["saturation_inactive"] = fold("saturation_inactive")
    inv["segment_error_bound"] = fold("error_bound")
    completed = [c for c in relevant if c["tail_bound"]["passed"] is not None]
    if completed:
        bad = [c["m"] for c in completed if not c["tail_bound"]["passed"]]
        inv["tail_bound"] = _verdict(not bad, failing_segments=bad,
                                     per_segment={c["m"]: c["tail_bound"] for c in completed})
    else:
        inv["tail_bound"] = _verdict(False, reason=f"vacuous: no completed segment with m >= m0 = {m0} "
                                                   f"before t_end = {cfg.t_end}")
    done = [k for k, s in est.segments.items() if s.completed]
    if done:
        k = max(done)
        seg = est.segments[k]
        nodes = seg.z.grid.nodes
        sel = (nodes >= seg.switch) & (nodes <= seg.end)
        emax = float(np.max(seg.error[sel]))
        inv["convergence_proxy"] = _verdict(emax <= 1.0 / k, segment=k, max_error=emax, limit=1.0 / k)
    else:
        inv["convergence_proxy"] = _verdict(False, reason="vacuous: no completed segment")
    la = tape.max_lookahead()
    if cfg.mode == "causal":
        inv["mode_soundness"] = _verdict(bool(la <= 0.0), max_lookahead=la, future_reads=tape.future_reads())
    else:
        inv["mode_soundness"] = _verdict(bool(la <= cfg.tau + 1e-9 * cfg.dt), max_lookahead=la, tau=cfg.tau)
    gates, dets, budgets, gains = {}, {}, {}, {}
    for R, rec in sorted(records.items()):
        key = str(int(R)) if float(R).is_integer() else str(R)
        gates[key] = rec.cert.gates().as_dict() if rec.cert is not None else None
        lifts = [s for s in rec.stages if hasattr(s, "report")]
        if lifts:
            dets[key] = [_completion_check(s) for s in lifts]
        if cfg.provider == "triangular_chain":
            budgets[key] = _stage_budgets(rec, plant.n)
        if rec.gain is not None:
            v = rec.gain.verification
            gains[key] = {"passed": bool(v["max_excess"] <= v["slack"]), **v}
    inv["certificate_gates"] = _verdict(all(g is not None and g["passed"] for g in gates.values()) and bool(gates),
                                        per_segment=gates)
    inv["completion_determinants"] = (
        _verdict(all(all(s["passed"] for s in v) for v in dets.values()), per_segment=dets)
        if dets else _verdict(None, reason="no lifted certificates in this run"))
    inv["stage_budgets"] = (
        _verdict(all(all(s["passed"] for s in v) for v in budgets.values()), per_segment=budgets)
        if budgets else _verdict(None, reason="not a triangular chain"))
    inv["gain_verification"] = _verdict(all(g["passed"] for g in gains.values()) and bool(gains),
                                        per_segment=gains)
    assert tuple(inv) == INVARIANTS
    return inv


def _completion_check(lifted) -> dict:
    comp = lifted.report.get("completion", {})
    min_log = comp.get("min_log_det", [])
    tau0 = comp.get("tau_at_start", [])
    L = lifted.full.L
    ok = all(np.isfinite(v) for v in min_log) and all(abs(t - L) <= 1e-9 * L for t in tau0)
    return {"passed": bool(ok), "min_log_det": min_log, "tau_at_start": tau0, "L": L}


def _stage_budgets(rec, n: int) -> list:
    out = []
    eps = rec.eps
    for k, st in enumerate(rec.stages, start=1):
        cert = st.full if hasattr(st, "full") else st
        lim = k * eps / n
        mn = float(cert.d_integral().min())
        out.append({"stage": k, "passed": bool(mn > -lim), "min_integral": mn, "limit": -lim})
    return out


def _trajectory_csv(grid, x, est) -> str:
    n = x.shape[1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + [f"x{i + 1}" for i in range(n)] + [f"Z{i + 1}" for i in range(n)]
               + ["err", "segment", "sat_factor"])
    err = est.error(x)
    for i, t in enumerate(grid.nodes):
        w.writerow([repr(float(t))] + [repr(float(v)) for v in x[i]] + [repr(float(v)) for v in est.Z[i]]
                   + [repr(float(err[i])), int(est.segment_index[i]), repr(float(est.sat_factor[i]))])
    return buf.getvalue()


def _gnuplot(schedule: dict, csv_name: str, n: int) -> str:
    err_col = 2 * n + 2
    seg_col = err_col + 1
    lines = [
        "set terminal pngcairo size 900,500",
        "set output 'convergence.png'",
        "set datafile separator ','",
        "set key top right",
        "set xlabel 't'",
        "set ylabel 'log10 |x - Z|'",
    ]
    for t in schedule["t"][1:]:
        lines.append(f"set arrow from {t!r}, graph 0 to {t!r}, graph 1 nohead dt 2 lc rgb 'gray'")
    lines.append(
        f"plot '{csv_name}' every ::1 using 1:(log10(${err_col} + 1e-300)) with lines title 'log10 error', "
        f"'{csv_name}' every ::1 using 1:(log10(1.0/${seg_col})) with steps title 'log10 1/m'"
    )
    return "\n".join(lines) + "\n"


def run_experiment(cfg: ExperimentConfig, out_dir=None, write: bool = True, inject=None,
                   log=None) -> RunReport:
    """Run the full pipeline; errors are captured into a failed report.

    ``inject`` (testing) maps a freshly built certificate to a replacement,
    e.g. to corrupt ``P`` and exercise the gates.
    """
    started = time.perf_counter()
    out = Path(out_dir or os.environ.get("SWOBS_OUT") or cfg.output)
    report = RunReport("ok", cfg.to_dict())
    try:
        plant = builtin_example(cfg.plant, cfg.plant_params)
        grid = TimeGrid.from_span(cfg.t0, cfg.t_end, cfg.dt)
        x0 = np.asarray(cfg.x0, dtype=float)
        traj, tape = simulate_plant(plant, cfg.t0, x0, grid, cfg.mode, cfg.tau if cfg.mode == "noncausal" else 0.0)
        records = {}
        cert_p, gain_p = make_providers(plant, cfg.provider, cfg.provider_params, cfg.L, cfg.mode, cfg.window,
                                        tape, cfg.t0, cfg.sphere_level, cfg.margin_ratio, records)
        if inject is not None:
            inner = cert_p

            def cert_p(R, t_bar0, xi, eps, sub):
                cert, box, template = inner(R, t_bar0, xi, eps, sub)
                cert = inject(cert)
                records[R].cert = cert
                return cert, box, template

            gain_inner = gain_p

            def gain_p(cert, box, template, eps_bar, sub):
                cert.assert_gates()
                return gain_inner(cert, box, template, eps_bar, sub)

        t_design = time.perf_counter()
        est = run_switching_observer(plant, cert_p, gain_p, cfg.t0, x0, grid, cfg.mode, tape,
                                     x_true=traj.values, eps_m=cfg.eps_m, L=cfg.L,
                                     max_segments=cfg.max_segments, method=cfg.method, log=log)
        report.timing["pipeline_s"] = time.perf_counter() - t_design
        report.schedule = est.schedule.as_dict()
        report.invariants = _collect_invariants(cfg, plant, est, records, tape, x0)
        report.details = {"m0": est.report["m0"],
                          "segments": {str(k): {"start": s.start, "switch": s.switch, "end": s.end,
                                                "completed": s.completed, "zeta": s.zeta, "method": s.method}
                                       for k, s in est.segments.items()}}
        if write:
            out.mkdir(parents=True, exist_ok=True)
            files = {
                "trajectory.csv": _trajectory_csv(grid, traj.values, est),
                "certificates.json": "{" + ",".join(
                    f'"{int(R)}": ' + certificate_to_json(rec.cert) for R, rec in sorted(records.items())) + "}",
                "gains.json": "{" + ",".join(
                    f'"{int(R)}": ' + gain_to_json(rec.gain) for R, rec in sorted(records.items())
                    if rec.gain is not None) + "}",
                "convergence.gp": _gnuplot(report.schedule, "trajectory.csv", plant.n),
            }
            for name, text in files.items():
                (out / name).write_text(text)
            report.files = sorted(files) + ["report.json"]
    except Exception as exc:  # captured, not raised: a failed run is a report entry
        report.status = "failed"
        report.error = {"type": type(exc).__name__, "message": str(exc)}
        for k in ("stage", "inequality", "witness"):
            if hasattr(exc, k):
                report.error[k] = getattr(exc, k)
        report.invariants = {k: _verdict(False, reason="run failed") for k in INVARIANTS}
    report.timing["total_s"] = time.perf_counter() - started
    if write:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json())
        (out / "timing.json").write_text(json.dumps(report.timing, indent=1, sort_keys=True))
        if "report.json" not in report.files:
            report.files.append("report.json")
    return report


# ---------------------------------------------------------------------------
# verification suite


def verify_suite(level: str = "quick", stream=None) -> int:
    """Run the built-in oracle checks; returns the process exit status."""
    from . import checks

    if level not in ("quick", "full"):
        raise ValueError(f"level must be quick or full, got {level!r}")
    stream = stream or sys.stdout
    results = checks.run_all(level)
    failures = [r for r in results if not r["passed"]]
    for r in results:
        print(f"{'PASS' if r['passed'] else 'FAIL'} {r['name']}: {r.get('detail', '')}", file=stream)
    print(json.dumps({"level": level, "checks": len(results), "failures": [r["name"] for r in failures]},
                     sort_keys=True), file=stream)
    return 1 if failures else 0
