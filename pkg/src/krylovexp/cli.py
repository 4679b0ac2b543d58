"""Command line front end: ``krylovexp --test 1 --mesh 64 --method ebk,ee2-rt ...``.

Every long flag can also be given in a flat ``key=value`` config file
(``--config run.cfg``); flags on the command line win.  List-valued
options (``method``, ``dt``, ``tol``, ``ns``) take comma-separated values.

Exit status: 0 when every run succeeded, 1 when at least one row failed,
2 for usage or configuration errors.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

from . import harness
from .la_core import ContractError, write_matrix_market
from .mesh_fem import diagnostics, format_diagnostics

log = logging.getLogger("krylovexp")

MESHES = (64, 128, 256, 512)
FULLSCALE_MESHES = (256, 512)
EXIT_OK, EXIT_ROW_FAILED, EXIT_USAGE = 0, 1, 2

DEFAULTS = {
    "test": 1,
    "mesh": 64,
    "nu": harness.DEFAULT_NU,
    "T": harness.DEFAULT_T,
    "method": "ebk",
    "dt": "10",
    "tol": "1e-4",
    "ns": "120",
    "m": 2,
    "jobs": 1,
    "interp": "cubic",
    "expokit_m": 30,
    "out": None,
    "trace": False,
    "export_matrix": None,
    "diagnostics": None,
    "source_study": False,
    "fullscale": False,
}
BOOL_KEYS = ("trace", "source_study", "fullscale")


class ConfigError(ValueError):
    pass


def read_config(path) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment, dashes in keys become underscores."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.lstrip("-").replace("-", "_")
        if key not in DEFAULTS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def _as_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off", ""):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def _split(value, kind, allow_empty=False):
    items = [s.strip() for s in str(value).split(",") if s.strip()]
    if not items and not allow_empty:
        raise ConfigError("empty list")
    try:
        return tuple(kind(s) for s in items)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="krylovexp",
        description="Run exponential Krylov integrators and ROS2 on the advection-diffusion test problems.")
    p.add_argument("--config", help="key=value file mirroring these flags")
    p.add_argument("--test", type=int, choices=(1, 2))
    p.add_argument("--mesh", type=int, choices=MESHES, help="grid size n (n x n elements)")
    p.add_argument("--nu", type=float, help="viscosity (default 1/6400)")
    p.add_argument("--T", type=float, help="final time (default 1000)")
    p.add_argument("--method", help=f"comma-separated subset of {','.join(harness.METHODS)}")
    p.add_argument("--dt", help="time step(s), comma-separated")
    p.add_argument("--tol", help="tolerance(s), comma-separated")
    p.add_argument("--ns", help="EBK snapshot count(s), comma-separated")
    p.add_argument("--m", type=int, help="EBK source rank")
    p.add_argument("--interp", choices=("linear", "cubic"), help="EBK source interpolation")
    p.add_argument("--expokit-m", dest="expokit_m", type=int, help="Krylov dimension of EXPOKIT substeps")
    p.add_argument("--out", help="CSV output path")
    p.add_argument("--jobs", type=int, help="parallel runs")
    p.add_argument("--trace", action="store_const", const=True,
                   help="write per-restart / per-iteration trace CSVs next to --out")
    p.add_argument("--export-matrix", dest="export_matrix", help="write A in Matrix Market format")
    p.add_argument("--diagnostics", help="write mesh/operator diagnostics as key=value ('-' for stdout)")
    p.add_argument("--source-study", dest="source_study", action="store_const", const=True,
                   help="also run the source-approximation study (n_s = 30, 60, 120)")
    p.add_argument("--fullscale", action="store_const", const=True,
                   help="allow the 256 and 512 meshes (minutes of CPU time)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_options(args: argparse.Namespace) -> dict:
    """Merge defaults, config file and command-line flags, and type-check the result."""
    opts = dict(DEFAULTS)
    if args.config:
        opts.update(read_config(args.config))
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            opts[key] = value
    try:
        for key in BOOL_KEYS:
            opts[key] = _as_bool(opts[key])
        for key in ("test", "mesh", "m", "jobs", "expokit_m"):
            opts[key] = int(opts[key])
        for key in ("nu", "T"):
            opts[key] = float(opts[key])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    opts["methods"] = _split(opts["method"], str, allow_empty=True)
    opts["dts"] = _split(opts["dt"], float)
    opts["tols"] = _split(opts["tol"], float)
    opts["ns_list"] = _split(opts["ns"], int)
    bad = [m for m in opts["methods"] if m not in harness.METHODS]
    if bad:
        raise ConfigError(f"unknown method(s) {bad}; choose from {harness.METHODS}")
    if opts["test"] not in (1, 2):
        raise ConfigError("test must be 1 or 2")
    if opts["mesh"] not in MESHES:
        raise ConfigError(f"mesh must be one of {MESHES}")
    if opts["mesh"] in FULLSCALE_MESHES and not opts["fullscale"]:
        raise ConfigError(f"mesh {opts['mesh']} is a full-scale run; pass --fullscale to allow it")
    if opts["interp"] not in ("linear", "cubic"):
        raise ConfigError("interp must be linear or cubic")
    if opts["trace"] and not opts["out"]:
        raise ConfigError("--trace needs --out (traces are written next to it)")
    for name in ("dts", "tols"):
        if any(not (x > 0 and math.isfinite(x)) for x in opts[name]):
            raise ConfigError(f"{name[:-1]} values must be positive")
    if opts["jobs"] < 1 or opts["m"] < 1:
        raise ConfigError("jobs and m must be at least 1")
    return opts


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve_options(args)
    except (ConfigError, OSError) as exc:
        print(f"krylovexp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    op = harness.benchmark_operator(opts["mesh"], opts["nu"])
    if opts["diagnostics"]:
        text = format_diagnostics(diagnostics(op)) + "\n"
        if opts["diagnostics"] == "-":
            sys.stdout.write(text)
        else:
            Path(opts["diagnostics"]).write_text(text)
    if opts["export_matrix"]:
        write_matrix_market(opts["export_matrix"], op.A,
                            comment=f"advection-diffusion operator, n={opts['mesh']}, nu={opts['nu']!r}")

    out = Path(opts["out"]) if opts["out"] else None
    cfg = harness.BenchConfig(test=opts["test"], mesh=opts["mesh"], nu=opts["nu"], T=opts["T"],
                              methods=opts["methods"], dts=opts["dts"], tols=opts["tols"],
                              ns=opts["ns_list"], m=opts["m"], jobs=opts["jobs"],
                              interpolation=opts["interp"], expokit_m=opts["expokit_m"],
                              trace_dir=str(out.parent / (out.stem + "_traces")) if opts["trace"] else None)
    problem = None
    try:
        if opts["methods"] or opts["source_study"]:
            problem = harness.build_problem(opts["test"], opts["mesh"], opts["nu"], opts["T"])
        rows = harness.run_benchmark(cfg, problem)
    except (RuntimeError, ContractError) as exc:
        print(f"krylovexp: setup failed: {exc}", file=sys.stderr)
        return EXIT_ROW_FAILED

    print(f"Test {opts['test']}, {opts['mesh']}x{opts['mesh']} grid, nu={opts['nu']:.6g}, T={opts['T']:g}")
    print(harness.format_table(rows))
    if out is not None:
        harness.write_csv(out, rows)

    study_failed = False
    if opts["source_study"]:
        study = harness.source_approx_study(problem, m=opts["m"], tol=min(opts["tols"]),
                                            interpolation=opts["interp"])
        print()
        print(harness.format_source_study(study))
        if out is not None:
            harness.write_source_study_csv(out.with_name(out.stem + "_source_study.csv"), study)
        study_failed = any(math.isnan(r.ebk_error) for r in study)

    failed = [r for r in rows if r.failed]
    for r in failed:
        print(f"FAILED {r.label()}: {r.note}", file=sys.stderr)
    return EXIT_ROW_FAILED if failed or study_failed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
