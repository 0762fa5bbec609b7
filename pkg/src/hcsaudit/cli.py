"""Command-line front end.

Subcommands: ``simulate``, ``audit``, ``sweep``, ``calibrate``, ``replay``
and ``presets``. ``--config`` takes a JSON path or a shipped preset name.
Reports are deterministic JSON (sorted keys); sweeps and replays also write a
CSV table.

Exit codes: 0 success, 2 configuration error, 3 estimation impossible
(every run discarded for some property).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__, workflows
from .config import load_any, load_experiment, load_sweep, preset_names
from .properties import WORLDS
from .simcore import ConfigurationError
from .smc import EstimationImpossible

EXIT_OK, EXIT_CONFIG, EXIT_IMPOSSIBLE = 0, 2, 3
DEFAULT_SEED = 1


def _write(text: str, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
        return
    p = Path(out)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text)


def _values(s: str) -> list[float]:
    try:
        return [float(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hcsaudit", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=f"hcsaudit {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="config JSON path or preset name")
        p.add_argument("--seed", type=int, default=None,
                       help=f"root seed (default: the config's scenario seed, else {DEFAULT_SEED})")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--alpha", type=float, default=None,
                       help="1 - confidence; for audits the joint coverage is 1 - alpha")
        p.add_argument("--runs", type=int, default=None, help="fixed number of runs per world")
        p.add_argument("--out", default=None, help="report path (default: stdout)")

    p = sub.add_parser("simulate", help="estimate latency/goodput (tunnel) or rttAv/enAv (rtt)")
    common(p)
    p.add_argument("--world", choices=WORLDS, default="hcs")
    p.add_argument("--delta", type=float, default=None, help="target confidence-interval width for all properties")
    p.add_argument("--archive", default=None, help="directory for per-run records")

    p = sub.add_parser("audit", help="TPR/FPR intervals, certified KL bound and claim verdicts")
    common(p)
    p.add_argument("--archive", default=None, help="directory for per-run records")

    p = sub.add_parser("sweep", help="vary one axis; writes a CSV table and a JSON report")
    common(p)

    p = sub.add_parser("calibrate", help="calibrate detector thresholds from ordinary-world runs")
    common(p)

    p = sub.add_parser("replay", help="re-run detectors over archived run records")
    common(p)
    p.add_argument("--archive", required=True)
    p.add_argument("--axis", choices=("maMultiplierK", "cumulativeThresholdN"), default=None)
    p.add_argument("--values", type=_values, default=None)

    sub.add_parser("presets", help="list shipped presets")
    return ap


def _seed(args, cfg) -> int:
    if args.seed is not None:
        return args.seed
    base = getattr(cfg, "base", cfg)
    return base.seed if base.scenario is not None else DEFAULT_SEED


def _run(args) -> int:
    if args.command == "presets":
        sys.stdout.write("\n".join(preset_names()) + "\n")
        return EXIT_OK
    if args.workers < 1:
        raise ConfigurationError("--workers must be >= 1", ["workers"])
    if args.runs is not None and args.runs < 1:
        raise ConfigurationError("--runs must be >= 1", ["runs"])
    if args.alpha is not None and not 0 < args.alpha < 1:
        raise ConfigurationError("--alpha must lie in (0, 1)", ["alpha"])

    if args.command == "sweep":
        spec = load_sweep(args.config)
        rep, table = workflows.sweep(spec, _seed(args, spec), args.workers, args.runs, args.alpha)
        _write(table, args.out)
        if args.out and args.out != "-":
            _write(workflows.dumps(rep), str(Path(args.out).with_suffix(".json")))
        return EXIT_OK

    exp = load_experiment(args.config)
    seed = _seed(args, exp)
    if args.command == "simulate":
        rep = workflows.simulate(exp, args.world, seed, args.workers, args.runs, args.alpha, args.delta,
                                 args.archive)
        _write(workflows.dumps(rep), args.out)
        if rep["impossible"]:
            print(f"estimation impossible (all runs discarded) for: {', '.join(rep['impossible'])}",
                  file=sys.stderr)
            return EXIT_IMPOSSIBLE
        return EXIT_OK
    if args.command == "audit":
        _write(workflows.dumps(workflows.audit(exp, seed, args.workers, args.runs, args.alpha, args.archive)),
               args.out)
        return EXIT_OK
    if args.command == "calibrate":
        _write(workflows.dumps(workflows.calibrate(exp, seed, args.workers, args.runs)), args.out)
        return EXIT_OK
    if args.command == "replay":
        if args.axis and not args.values:
            raise ConfigurationError("--axis needs --values", ["values"])
        rep, table = workflows.replay(args.archive, exp, seed, args.axis, args.values, args.workers, args.alpha)
        _write(table, args.out)
        if args.out and args.out != "-":
            _write(workflows.dumps(rep), str(Path(args.out).with_suffix(".json")))
        return EXIT_OK
    raise AssertionError(args.command)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return _run(args)
    except ConfigurationError as exc:
        fields = f" [fields: {', '.join(exc.fields)}]" if exc.fields else ""
        print(f"configuration error: {exc}{fields}", file=sys.stderr)
        return EXIT_CONFIG
    except EstimationImpossible as exc:
        print(f"estimation impossible: {exc}", file=sys.stderr)
        return EXIT_IMPOSSIBLE
