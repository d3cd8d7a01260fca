"""Command line: ``tribody {simulate,verify,scan,export}``.

Exit codes: 0 success or certified, 2 configuration error, 3 infeasible
section, 4 numerical failure, 5 not certified, 6 input/output error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .config import ConfigError, load_config
from .dynamics import SingularStateError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_NUMERICAL = 4
EXIT_UNCERTIFIED = 5
EXIT_IO = 6

log = logging.getLogger("tribody")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tribody", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="progress messages on stderr")
    sub = p.add_subparsers(dest="mode", required=True)
    for name, text in (("simulate", "integrate one initial condition"),
                       ("verify", "search section states for a large-potential certificate"),
                       ("scan", "classify a grid of section states"),
                       ("export", "plot-ready series from trajectory files")):
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--config", type=Path, help="JSON config file")
        sp.add_argument("--out", type=Path, help="output directory")
        sp.add_argument("--workers", type=int, help="worker processes (scan)")
        sp.add_argument("--seed", type=int, help="random seed")
        if name == "verify":
            sp.add_argument("--K", type=float, dest="K", help="potential bound")
        if name == "export":
            sp.add_argument("inputs", nargs="*", type=Path, help="trajectory or export CSV files")
    return p


def _overrides(args) -> dict:
    over = {"mode": args.mode}
    for key in ("workers", "seed"):
        if getattr(args, key) is not None:
            over[key] = getattr(args, key)
    if args.out is not None:
        over["out"] = str(args.out)
    if getattr(args, "K", None) is not None:
        over["K"] = args.K
    if getattr(args, "inputs", None):
        over["export"] = {"inputs": [str(p) for p in args.inputs]}
    return over


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, _overrides(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"I/O error: cannot create output directory {out}: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        return _dispatch(cfg, out)
    except harness.ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SingularStateError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except harness.InfeasibleSectionError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def _dispatch(cfg, out: Path) -> int:
    if cfg.mode == "simulate":
        res = harness.simulate(cfg, out)
        reasons = res["reason"] if isinstance(res["reason"], list) else [res["reason"]]
        if any(r in ("close-encounter", "budget") for r in reasons):
            print(f"numerical failure: run ended with {reasons}", file=sys.stderr)
            return EXIT_NUMERICAL
        return EXIT_OK
    if cfg.mode == "verify":
        outcome, doc = harness.verify(cfg, out)
        print(f"verdict: {doc['verdict']}  ({outcome}; certificate {out / 'certificate.json'})")
        for reason in doc.get("reasons", [])[:5]:
            print(f"  {reason}")
        return {"certified": EXIT_OK, "uncertified": EXIT_UNCERTIFIED, "infeasible": EXIT_INFEASIBLE,
                "singular": EXIT_NUMERICAL}[outcome]
    if cfg.mode == "scan":
        records = harness.scan(cfg, out)
        for row in harness.scan_summary(records)["by_r0"]:
            print(f"r0={row['r0']:.6g}: {row['certified']}/{row['runs']} certified")
        return EXIT_OK
    inputs = cfg.export.inputs
    if not inputs:
        print("config error: export needs at least one input file", file=sys.stderr)
        return EXIT_CONFIG
    for path in inputs:
        target = harness.export_file(Path(path), out, cfg.export.max_points, cfg.K)
        print(target)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
