"""Command-line entry point: ``cavityrb {init,offline,online,benchmark,export-fields}``.

Exit codes: 0 success, 2 configuration or artifact error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .certification import EigenSolveFailure, InvalidBeta, NonPositive, SingularInterpolation
from .eim import DegenerateSnapshot
from .fom import LinearSolveFailure, NonConvergence
from .mesh import ParameterPoint
from .pipeline import (ArtifactError, ConfigError, OfflineArtifact, RunConfig, StageError,
                       export_fields, run_benchmark, run_offline, run_online)
from .rb_offline import GreedyStall, RedundantSnapshot
from .rb_online import NewtonDivergence

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
_NUMERICAL = (StageError, NonConvergence, LinearSolveFailure, NewtonDivergence, DegenerateSnapshot,
              EigenSolveFailure, NonPositive, InvalidBeta, SingularInterpolation, GreedyStall,
              RedundantSnapshot, FloatingPointError, np.linalg.LinAlgError)


def _parse_mu(text: str) -> ParameterPoint:
    try:
        ra, h = (float(v) for v in text.split(","))
        return ParameterPoint(ra, h)
    except ValueError as exc:
        raise ConfigError(f"parameter must be 'Ra,height', got {text!r}") from exc


def _read_mu_file(path) -> list:
    out = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                out.append(ParameterPoint(float(row[0]), float(row[1])))
            except (ValueError, IndexError):
                continue  # header line
    if not out:
        raise ConfigError(f"no parameters in {path}")
    return out


def _parameters(args) -> list:
    mus = [_parse_mu(m) for m in (args.mu or [])]
    if getattr(args, "mu_file", None):
        mus += _read_mu_file(args.mu_file)
    return mus


def _load(args) -> OfflineArtifact:
    config = RunConfig.load(args.config) if getattr(args, "config", None) else None
    return OfflineArtifact.load(args.artifact, config)


def cmd_init(args) -> int:
    text = RunConfig().to_text()
    if args.output == "-":
        sys.stdout.write(text)
    else:
        Path(args.output).write_text(text)
    return EXIT_OK


def cmd_offline(args) -> int:
    config = RunConfig.load(args.config)
    art = run_offline(config, args.artifact)
    last = art.greedy_log[-1] if art.greedy_log else {}
    print(f"artifact written to {args.artifact}: N={art.basis.n}, M={art.eim.size}, "
          f"max indicator {last.get('max_indicator', float('nan')):.3e}")
    return EXIT_OK


def cmd_online(args) -> int:
    art = _load(args)
    mus = _parameters(args)
    if not mus:
        raise ConfigError("give at least one --mu or --mu-file")
    rows = run_online(art, mus, csv_path=args.output)
    for r in rows:
        c = r.get("certificate")
        extra = (f"eps={c.epsilon_n:.3e} tau={c.tau_n:.3e} delta={c.delta_n:.3e}" if c
                 else r["status"])
        print(f"Ra={r['rayleigh']:.6g} h={r['height']:.4g} {extra} t={r['wall_time']:.2e}s")
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_NUMERICAL


def cmd_benchmark(args) -> int:
    art = _load(args)
    mus = _parameters(args)
    if not mus:
        mus = art.config.box.sample(args.n_test, np.random.default_rng(args.seed))
    rows = run_benchmark(art, mus, repeats=args.repeats, csv_path=args.output)
    print(f"{'Ra':>10} {'h':>6} {'T_FE':>9} {'T_online':>9} {'speedup':>8} "
          f"{'err_u':>9} {'err_T':>9} {'err_p':>9}")
    for r in rows:
        print(f"{r['rayleigh']:10.1f} {r['height']:6.3f} {r['t_fe']:9.3f} {r['t_online']:9.2e} "
              f"{r['speedup']:8.1f} {r['velocity_h1']:9.2e} {r['temperature_h1']:9.2e} "
              f"{r['pressure_l2']:9.2e}")
    return EXIT_OK


def cmd_export(args) -> int:
    art = _load(args)
    export_fields(art, _parse_mu(args.mu), args.output, full_order=args.full_order)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cavityrb", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init", help="write the default configuration")
    s.add_argument("output", nargs="?", default="-")
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("offline", help="build and save an offline artifact")
    s.add_argument("--config", required=True)
    s.add_argument("--artifact", required=True)
    s.set_defaults(func=cmd_offline)

    def artifact_args(s):
        s.add_argument("--artifact", required=True)
        s.add_argument("--config", help="refuse the artifact unless it was built from this file")

    s = sub.add_parser("online", help="reduced solves with certificates")
    artifact_args(s)
    s.add_argument("--mu", action="append", help="'Ra,height' (repeatable)")
    s.add_argument("--mu-file", help="CSV with Ra,height rows")
    s.add_argument("--output", help="certificate CSV")
    s.set_defaults(func=cmd_online)

    s = sub.add_parser("benchmark", help="full-order vs reduced timings and errors")
    artifact_args(s)
    s.add_argument("--mu", action="append")
    s.add_argument("--mu-file")
    s.add_argument("--n-test", type=int, default=10)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--output")
    s.set_defaults(func=cmd_benchmark)

    s = sub.add_parser("export-fields", help="write fields at one parameter as legacy VTK")
    artifact_args(s)
    s.add_argument("--mu", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--full-order", action="store_true", help="export the finite-element solution")
    s.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ArtifactError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _NUMERICAL as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
