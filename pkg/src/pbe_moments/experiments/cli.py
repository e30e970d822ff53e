"""Command line interface: ``pbe-moments {run,sweep,error,cavity-velocity}``.

Exit codes: 0 success, 1 other solver failure, 2 configuration error,
3 closure failure (realizability or maximum-entropy solve), 4 time-step
violation.
"""
import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from ..errors import OptimizationError, PBEError, RealizabilityError, TimeStepError
from ..spatial import Grid2D, load_velocity, save_velocity
from .config import PROFILES, ConfigError, load_config
from .runner import (
    RunFailure,
    grid_of,
    reference_run,
    relative_l2_error,
    report_error,
    run,
    sweep_orders,
    velocity_of,
)

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_CLOSURE, EXIT_TIMESTEP = 0, 1, 2, 3, 4


def exit_code(exc):
    """Exit status for an exception raised by a command."""
    if isinstance(exc, RunFailure):
        exc = exc.cause
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (RealizabilityError, OptimizationError)):
        return EXIT_CLOSURE
    if isinstance(exc, TimeStepError):
        return EXIT_TIMESTEP
    return EXIT_FAILURE


def parse_orders(values):
    """``["1-9"]``, ``["1,3,5"]`` or ``["1", "2"]`` to a list of orders."""
    out = []
    for item in values:
        for part in str(item).split(","):
            part = part.strip()
            if not part:
                continue
            lo, sep, hi = part.partition("-")
            try:
                out.extend(range(int(lo), int(hi) + 1) if sep else [int(lo)])
            except ValueError as exc:
                raise ConfigError(f"bad order specification {part!r}") from exc
    if not out:
        raise ConfigError("no orders given")
    return out


def _config(args, **extra):
    overrides = dict(extra)
    if getattr(args, "closure", None):
        overrides["closure"] = args.closure.upper()
    if getattr(args, "out", None):
        overrides["output_dir"] = str(args.out)
    if getattr(args, "final_time", None) is not None:
        overrides["final_time"] = args.final_time
    return load_config(args.config, args.profile, **overrides)


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


def cmd_run(args):
    cfg = _config(args, order=args.order)
    report = run(cfg, args.check_realizability)
    if args.error:
        report.e2 = report_error(report, reference_run(cfg))
    summary = report.summary()
    summary["gamma0_initial"] = float(np.asarray(report.totals())[0])
    summary["gamma0_final"] = float(np.asarray(report.totals())[-1])
    if args.check_realizability and report.realizability_failures:
        _emit(summary)
        raise RealizabilityError(f"{report.realizability_failures} cell states failed the realizability test")
    _emit(summary)
    return EXIT_OK


def cmd_sweep(args):
    cfg = _config(args)
    cfg = cfg.with_(output_dir=None)
    orders = parse_orders(args.order or ["1-9"])
    rows = sweep_orders(cfg, orders, out=args.out, check_realizability=args.check_realizability,
                        parallel=args.parallel)
    for n, seconds, e2 in rows:
        _emit({"order": n, "seconds": seconds, "E2": e2})
    return EXIT_OK


def read_series(path):
    """``(time, gamma0)`` columns of a run CSV."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        t = np.array([float(r["time"]) for r in rows])
        g = np.array([float(r["gamma0"]) for r in rows])
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot read series from {path}: {exc}") from exc
    if len(t) == 0:
        raise ConfigError(f"{path} holds no samples")
    return t, g


def cmd_error(args):
    if args.reference and args.candidate:
        t_ref, g_ref = read_series(args.reference)
        t, g = read_series(args.candidate)
        e2 = relative_l2_error(g_ref, g, t_ref, t)
        _emit({"reference": str(args.reference), "candidate": str(args.candidate), "E2": e2})
        return EXIT_OK
    if args.reference or args.candidate:
        raise ConfigError("error needs both a reference and a candidate CSV, or --config")
    if args.config is None:
        raise ConfigError("error needs two CSV files or --config")
    cfg = _config(args, order=args.order)
    report = run(cfg)
    e2 = report_error(report, reference_run(cfg))
    _emit({"kind": cfg.kind, "closure": cfg.closure, "order": cfg.order, "E2": e2})
    return EXIT_OK


def cmd_velocity(args):
    if args.action == "export":
        cfg = _config(args)
        vel = velocity_of(cfg)
        out = Path(args.out or ".")
        out.mkdir(parents=True, exist_ok=True)
        save_velocity(vel, out / "u.txt", out / "z.txt")
        grid = grid_of(cfg)
    else:
        if not args.files or len(args.files) != 2:
            raise ConfigError("import needs the u and z files")
        grid = None
        if args.config is not None:
            grid = grid_of(_config(args))
        try:
            vel = load_velocity(args.files[0], args.files[1], grid=grid)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read velocity files: {exc}") from exc
        if grid is None:
            grid = Grid2D(*vel.u.shape)
    div = np.abs(vel.divergence(grid)).max()
    _emit({
        "action": args.action,
        "shape": list(vel.u.shape),
        "max_speed": float(np.hypot(vel.u, vel.z).max()),
        "max_divergence": float(div),
    })
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="pbe-moments", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required,
                       help="INI file or shipped experiment name (breakage, aggregation, cavity)")
        p.add_argument("--profile", choices=PROFILES, default=None, help="profile section to apply")
        p.add_argument("--closure", type=str.lower, choices=("pn", "mn", "qmom", "fvs"))
        p.add_argument("--out", type=Path, help="output directory")

    p = sub.add_parser("run", help="run one experiment")
    common(p)
    p.add_argument("--order", type=int, help="moment order N")
    p.add_argument("--final-time", type=float)
    p.add_argument("--check-realizability", action="store_true", help="test every M_N state")
    p.add_argument("--error", action="store_true", help="also compute E2 against the FVS reference")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="order sweep with timings and E2")
    common(p)
    p.add_argument("--order", nargs="+", help="orders, e.g. 1-9 or 1,3,5 (default 1-9)")
    p.add_argument("--final-time", type=float)
    p.add_argument("--check-realizability", action="store_true")
    p.add_argument("--parallel", action="store_true", help="run orders in parallel (timings not comparable)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("error", help="relative space-time L2 error")
    common(p, config_required=False)
    p.add_argument("reference", nargs="?", help="reference CSV (time, gamma0)")
    p.add_argument("candidate", nargs="?", help="candidate CSV")
    p.add_argument("--order", type=int)
    p.add_argument("--final-time", type=float)
    p.set_defaults(func=cmd_error)

    p = sub.add_parser("cavity-velocity", help="export or import cavity velocity files")
    p.add_argument("action", choices=("export", "import"))
    p.add_argument("files", nargs="*", help="u and z files (import)")
    common(p, config_required=False)
    p.set_defaults(func=cmd_velocity)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "cavity-velocity" and args.action == "export" and args.config is None:
        args.config = "cavity"
    try:
        return args.func(args)
    except (ConfigError, PBEError) as exc:
        print(f"pbe-moments: error: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
