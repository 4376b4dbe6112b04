"""``salab`` command line: ``run``, ``audit`` and ``version``.

Exit codes: 0 when every requested audit passes, 2 when some audit fails,
1 for configuration errors.
"""

from __future__ import annotations

import argparse
import json
import sys

from ._errors import ConfigError, SALabError
from .scenario import ANALYSES, _plain, parse_scenario, run_experiment, static_audits


def _seed_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as err:
        raise ConfigError(f"--seeds expects comma-separated integers, got {text!r}") from err


def _analyses(text: str) -> list[str]:
    names = [a.strip() for a in text.split(",") if a.strip()]
    bad = [a for a in names if a not in ANALYSES]
    if bad:
        raise ConfigError(f"--analyses: unknown {bad}; choose from {list(ANALYSES)}")
    return names


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="salab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="simulate every seed and run the requested analyses")
    run.add_argument("scenario")
    run.add_argument("--out", help="output directory (overrides SA_LAB_OUT and the scenario)")
    run.add_argument("--seeds", help="comma-separated seed list replacing the scenario's")
    run.add_argument("--analyses", help=f"comma-separated subset of {','.join(ANALYSES)}; empty for none")
    aud = sub.add_parser("audit", help="assumption checks only, no simulation")
    aud.add_argument("scenario")
    sub.add_parser("version", help="print the library version")
    return p


def _print_audits(audits: dict, stream):
    for name, entry in audits.items():
        line = f"{name:4s} {entry['status']}"
        if entry.get("justification"):
            line += f"  ({entry['justification']})"
        print(line, file=stream)


def main(argv=None) -> int:
    from . import __version__

    args = build_parser().parse_args(argv)
    if args.command == "version":
        print(__version__)
        return 0
    try:
        s = parse_scenario(args.scenario)
        if args.command == "audit":
            audits = _plain({k: v for k, v in static_audits(s).items()})
            _print_audits(audits, sys.stdout)
            return 2 if any(v["status"] == "fail" for v in audits.values()) else 0
        changes = {}
        if args.seeds is not None:
            changes["seeds"] = _seed_list(args.seeds)
        if args.analyses is not None:
            changes["analyses"] = _analyses(args.analyses)
        if changes:
            s = s.replace(**changes)
        report = run_experiment(s, out_dir=args.out)
    except ConfigError as err:
        print(f"salab: configuration error: {err}", file=sys.stderr)
        return 1
    except SALabError as err:
        print(f"salab: {type(err).__name__}: {err}", file=sys.stderr)
        return 1

    v = report.verdict
    print(f"verdict: {v['headline']} ({v['diverged_seeds']}/{v['seeds']} seeds diverged)")
    if "converged_seeds" in v:
        print(f"equilibrium: {v['converged_seeds']}/{v['seeds']} seeds within tolerance")
    _print_audits(report.audits, sys.stdout)
    failed = report.failed_audits()
    if failed:
        print("failed: " + ", ".join(failed))
    print(f"report: {report.out_dir / 'report.json'}")
    return report.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
