import json
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from swobs.certificates import Certificate
from swobs.cli import main
from swobs.harness import (
    INVARIANTS,
    ConfigError,
    config_from_dict,
    config_to_toml,
    parse_config,
    run_experiment,
    verify_suite,
)
from swobs.numerics import TimeGridFunction

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

FAST = {
    "plant": {"name": "linear_detectable", "x0": [0.5, 1.0, -1.0]},
    "grid": {"t_end": 12.0, "dt": 1e-2},
    "certificate": {"provider": "detectability"},
}


def _fast_toml(tmp_path, extra=""):
    path = tmp_path / "fast.toml"
    path.write_text(config_to_toml(config_from_dict(FAST)) + extra)
    return path


# --- configuration ----------------------------------------------------------------

def test_defaults():
    cfg = config_from_dict({"plant": {"name": "ex3_1", "x0": [0.5, 1.0, -1.0]}})
    assert (cfg.dt, cfg.tau, cfg.eps_m, cfg.sphere_level, cfg.mode) == (1e-3, 0.5, 0.1, 90, "noncausal")
    assert cfg.provider == "composite_lift" and cfg.L == 2.0


def test_causal_mode_needs_nonvanishing_coefficient():
    with pytest.raises(ConfigError) as info:
        config_from_dict({"plant": {"name": "ex3_1", "x0": [0.5, 1.0, -1.0], "params": {"a": "x1"}},
                          "mode": {"kind": "causal"}})
    assert any("causal" in p for p in info.value.problems)
    config_from_dict({"plant": {"name": "ex3_1", "x0": [0.5, 1.0, -1.0], "params": {"a": "1"}},
                      "mode": {"kind": "causal"}})


def test_all_problems_reported_together():
    with pytest.raises(ConfigError) as info:
        config_from_dict({"plant": {"name": "nope", "x0": [1.0]}, "grid": {"dt": 0.0},
                          "certificate": {"provider": "magic", "L": 0.5}, "extra": {}})
    probs = info.value.problems
    assert len(probs) == 5
    for word in ("unknown sections", "unknown plant", "grid.dt", "provider", "certificate.L"):
        assert any(word in p for p in probs), word


def test_wrong_state_length_and_inadmissible_state():
    with pytest.raises(ConfigError, match="length"):
        config_from_dict({"plant": {"name": "ex3_1", "x0": [1.0, 0.0]}})
    with pytest.raises(ConfigError, match="admissible"):
        config_from_dict({"plant": {"name": "ex3_1", "x0": [0.0, 0.0, 0.0]}})


def test_bad_toml_syntax(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[plant\nname = 1")
    with pytest.raises(ConfigError, match="TOML"):
        parse_config(path)


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-4, 0.1), st.floats(4.0, 50.0), st.sampled_from(["causal", "noncausal"]),
       st.floats(0.05, 1.0), st.integers(1, 200), st.floats(1.1, 10.0))
def test_toml_round_trip(dt, t_end, mode, tau, level, L):
    cfg = config_from_dict({
        "plant": {"name": "linear_detectable", "x0": [0.5, 1.0, -1.0]},
        "grid": {"dt": dt, "t_end": t_end},
        "mode": {"kind": mode, "tau": tau},
        "certificate": {"provider": "detectability", "L": L},
        "gain": {"sphere_level": level},
    })
    again = config_from_dict(tomllib.loads(config_to_toml(cfg)))
    assert again == cfg


# --- runs ------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def fast_runs(tmp_path_factory):
    a, b = tmp_path_factory.mktemp("a"), tmp_path_factory.mktemp("b")
    cfg = config_from_dict(FAST)
    return run_experiment(cfg, a), run_experiment(cfg, b), a, b


def test_fast_run_passes(fast_runs):
    ra, _, _, _ = fast_runs
    assert ra.status == "ok" and ra.passed, {k: v["passed"] for k, v in ra.invariants.items()}
    assert ra.invariants["stage_budgets"]["passed"] is None


def test_report_lists_every_invariant(fast_runs):
    ra, _, a, _ = fast_runs
    assert tuple(ra.invariants) == INVARIANTS
    doc = json.loads((a / "report.json").read_text())
    assert set(doc["invariants"]) == set(INVARIANTS)
    assert "timing" not in doc and (a / "timing.json").exists()


def test_reruns_are_byte_identical(fast_runs):
    _, _, a, b = fast_runs
    for name in ("trajectory.csv", "certificates.json", "gains.json", "report.json", "convergence.gp"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_trajectory_csv_header(fast_runs):
    _, _, a, _ = fast_runs
    header = (a / "trajectory.csv").read_text().splitlines()[0]
    assert header == "t,x1,x2,x3,Z1,Z2,Z3,err,segment,sat_factor"


def test_certificate_files_parse(fast_runs):
    _, _, a, _ = fast_runs
    certs = json.loads((a / "certificates.json").read_text())
    assert set(certs) >= {"1", "2"}


def test_injected_fault_is_reported(tmp_path):
    def corrupt(cert):
        P = TimeGridFunction.constant(cert.grid, 0.5 * np.eye(cert.dim))
        return Certificate(P, cert.Pdot, cert.d, cert.L, cert.eps, cert.causality, cert.tau0)

    rep = run_experiment(config_from_dict(FAST), tmp_path, inject=corrupt)
    assert rep.status == "failed"
    assert "psd" in rep.error["message"]
    assert all(v["passed"] is False for v in rep.invariants.values())
    assert json.loads((tmp_path / "report.json").read_text())["status"] == "failed"


def test_vacuous_invariants_fail_with_reason(tmp_path):
    doc = dict(FAST, grid={"t_end": 3.5, "dt": 1e-2})
    rep = run_experiment(config_from_dict(doc), write=False)
    assert rep.invariants["tail_bound"]["passed"] is False
    assert "vacuous" in rep.invariants["tail_bound"]["reason"]


# --- command line --------------------------------------------------------------------------

def test_cli_run_ok(tmp_path, capsys):
    path = _fast_toml(tmp_path)
    out = tmp_path / "out"
    assert main(["run", str(path), "--out", str(out)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == len(INVARIANTS) and all(l.split()[0] in ("PASS", "N/A") for l in lines)
    assert (out / "report.json").exists()


def test_cli_output_from_environment(tmp_path, monkeypatch):
    path = _fast_toml(tmp_path)
    monkeypatch.setenv("SWOBS_OUT", str(tmp_path / "env"))
    assert main(["run", str(path)]) == 0
    assert (tmp_path / "env" / "trajectory.csv").exists()


def test_cli_config_errors_exit_2(tmp_path, capsys):
    assert main(["run", str(tmp_path / "missing.toml")]) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text('[plant]\nname = "ex3_1"\nx0 = [1.0, 0.0, 0.0]\n[grid]\ndt = 0.0\n')
    assert main(["run", str(bad)]) == 2
    assert "grid.dt" in capsys.readouterr().err


def test_cli_failed_run_exits_1(tmp_path):
    path = tmp_path / "short.toml"
    doc = dict(FAST, grid={"t_end": 3.5, "dt": 1e-2}, output={"directory": str(tmp_path / "o")})
    path.write_text(config_to_toml(config_from_dict(doc)))
    assert main(["run", str(path)]) == 1


def test_cli_list_examples(capsys):
    assert main(["list-examples"]) == 0
    names = [l.split(":")[0] for l in capsys.readouterr().out.splitlines()]
    assert names == ["ex3_1", "ex3_2", "ex4_1", "linear_detectable"]


def test_cli_show_cert(fast_runs, capsys):
    _, _, a, _ = fast_runs
    assert main(["show-cert", str(a / "certificates.json")]) == 0
    out = capsys.readouterr().out
    assert "[1] dim=3" in out and "FAIL" not in out


def test_cli_verify_quick(capsys):
    assert main(["verify"]) == 0
    assert verify_suite("quick", sys.stdout) == 0
    last = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert last["failures"] == []
