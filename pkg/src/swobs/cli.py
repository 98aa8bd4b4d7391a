"""Command line entry point: ``swobs run|verify|list-examples|show-cert``."""
from __future__ import annotations

import argparse
import json
import sys

from .certificates import certificate_from_json
from .harness import ConfigError, parse_config, run_experiment, verify_suite
from .model import BUILTIN_EXAMPLES

EXIT_OK, EXIT_RUN_FAILED, EXIT_CONFIG = 0, 1, 2


def _cmd_run(args) -> int:
    try:
        cfg = parse_config(args.config)
    except FileNotFoundError:
        print(f"config not found: {args.config}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        for p in exc.problems:
            print(f"config error: {p}", file=sys.stderr)
        return EXIT_CONFIG
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    report = run_experiment(cfg, out_dir=args.out, log=log)
    for name, v in report.invariants.items():
        verdict = {True: "PASS", False: "FAIL", None: "N/A"}[v["passed"]]
        print(f"{verdict} {name}")
    if report.status != "ok":
        print(f"run failed: {report.error['type']}: {report.error['message']}", file=sys.stderr)
        return EXIT_RUN_FAILED
    return EXIT_OK if report.passed else EXIT_RUN_FAILED


def _cmd_verify(args) -> int:
    return verify_suite(args.level)


def _cmd_list(args) -> int:
    for name, (_, desc) in sorted(BUILTIN_EXAMPLES.items()):
        print(f"{name}: {desc}")
    return EXIT_OK


def _cmd_show(args) -> int:
    with open(args.cert) as fh:
        text = fh.read()
    doc = json.loads(text)
    # run outputs hold one certificate per segment
    certs = doc if "grid" not in doc else {"certificate": doc}
    for key, body in certs.items():
        cert = certificate_from_json(json.dumps(body))
        g = cert.grid
        gates = cert.gates()
        print(f"[{key}] dim={cert.dim} L={cert.L:g} eps={cert.eps:g} causality={cert.causality} "
              f"grid=[{g.t_start:g}, {g.t_end:g}] dt={g.dt:g}")
        print(f"  stages: {', '.join(str(p.get('stage')) for p in cert.provenance)}")
        for name, chk in gates.checks.items():
            verdict = "PASS" if chk["passed"] else ("FAIL" if chk.get("fatal", True) else "WARN")
            print(f"  {verdict} {name}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="swobs", description="Switching observer experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment from a TOML config")
    r.add_argument("config")
    r.add_argument("--out", default=None, help="output directory (SWOBS_OUT also works)")
    r.add_argument("-v", "--verbose", action="store_true")
    r.set_defaults(fn=_cmd_run)
    v = sub.add_parser("verify", help="run the built-in oracle checks")
    v.add_argument("--level", choices=("quick", "full"), default="quick")
    v.set_defaults(fn=_cmd_verify)
    ls = sub.add_parser("list-examples", help="list built-in plants")
    ls.set_defaults(fn=_cmd_list)
    s = sub.add_parser("show-cert", help="summarise a certificate JSON file")
    s.add_argument("cert")
    s.set_defaults(fn=_cmd_show)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
