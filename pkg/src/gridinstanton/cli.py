"""Command-line front end.

Exit codes: 0 success (or SAT), 2 UNSAT as a result, 1 error.
Set GRIDINSTANTON_LOG to a logging level name (DEBUG, INFO, ...) for progress.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    p_shed_estimate,
    reduce_nominal,
    scan_2d,
    spectrum_to_csv,
    spectrum_to_dict,
    stress_report,
)
from .demand import DemandModel
from .feasibility import evaluate
from .grid import GridError, GridValidationError, dump_grid_json, load_grid
from .search import AmoebaNotConverged, NominalUnsatError, NoUnsatPointError, SearchConfig, multi_start

log = logging.getLogger("gridinstanton")

EXIT_OK, EXIT_ERROR, EXIT_UNSAT = 0, 1, 2


class CLIError(Exception):
    pass


# -- output plumbing ---------------------------------------------------------------


def write_atomic(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dumps(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    inputs: dict
    config: dict
    version: str = __version__
    wall_clock_seconds: float = 0.0
    runs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)

    def to_json(self):
        return _dumps(dataclasses.asdict(self))


# -- input helpers -----------------------------------------------------------------


def _load(args):
    try:
        grid = load_grid(args.grid)
    except FileNotFoundError:
        raise CLIError(f"grid file not found: {args.grid}")
    except GridValidationError as exc:
        lines = [f"  {i.severity}: {i.message}" for i in exc.report]
        raise CLIError("grid failed validation:\n" + "\n".join(lines))
    except (GridError, ValueError) as exc:
        raise CLIError(f"cannot read grid {args.grid}: {exc}")
    if getattr(args, "half_max_load", False):
        grid = grid.with_nominal(np.asarray(grid.nominal_demand) * 0.5)
    return grid


def _read_demand(path, grid):
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CLIError(f"demand file not found: {path}")
    except json.JSONDecodeError as exc:
        raise CLIError(f"demand file {path}: line {exc.lineno} column {exc.colno}: {exc.msg}")
    if isinstance(data, dict) and "demand" in data:
        data = data["demand"]
    if isinstance(data, list):
        d = np.array(data, dtype=float)
        if d.size != grid.n_loads:
            raise CLIError(f"demand list has {d.size} entries, grid has {grid.n_loads} loads")
        return d
    if isinstance(data, dict):
        d = np.array(grid.nominal_demand, dtype=float)
        for key, val in data.items():
            try:
                d[grid.load_index(int(key))] = float(val)
            except (KeyError, ValueError):
                raise CLIError(f"demand file names {key!r}, which is not a load bus")
        return d
    raise CLIError("demand file must hold a list or a {bus: MW} object")


def _search_config(args):
    cfg = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise CLIError(f"config file not found: {args.config}")
        except json.JSONDecodeError as exc:
            raise CLIError(f"config file {args.config}: line {exc.lineno} column {exc.colno}: {exc.msg}")
    for flag, key in (("runs", "runs"), ("seed", "seed"), ("jobs", "jobs"),
                      ("dedup_delta", "dedup_delta"), ("spread", "spread"), ("tol", "tol"),
                      ("objective", "objective")):
        val = getattr(args, flag)
        if val is not None:
            cfg[key] = val
    try:
        return SearchConfig.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise CLIError(f"bad search configuration: {exc}")


def _manifest_inputs(args):
    out = {str(args.grid): sha256_file(args.grid)}
    for attr in ("demand", "config"):
        p = getattr(args, attr, None)
        if p:
            out[str(p)] = sha256_file(p)
    return out


# -- commands ------------------------------------------------------------------------


def cmd_check(args):
    t0 = time.perf_counter()
    grid = _load(args)
    d = _read_demand(args.demand, grid) if args.demand else np.array(grid.nominal_demand, dtype=float)
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise CLIError("demand entries must be finite and nonnegative")
    res = evaluate(grid, d)
    text = _dumps(res.to_dict(grid))
    if args.out:
        write_atomic(args.out, text)
        man = RunManifest("check", _manifest_inputs(args), {"half_max_load": args.half_max_load},
                          wall_clock_seconds=time.perf_counter() - t0, outputs=[str(args.out)])
        write_atomic(str(args.out) + ".manifest.json", man.to_json())
    else:
        sys.stdout.write(text)
    return EXIT_OK if res.is_sat else EXIT_UNSAT


def cmd_instanton(args):
    t0 = time.perf_counter()
    grid = _load(args)
    cfg = _search_config(args)
    model = DemandModel(grid.nominal_demand, args.T)
    out = Path(args.out)

    def progress(o):
        if o.converged:
            log.info("run %d: V=%.6g after %d iterations", o.index, o.value, o.iterations)
        else:
            log.warning("run %d failed: %s", o.index, o.message)

    try:
        spectrum = multi_start(grid, model, cfg, progress)
    except NominalUnsatError as exc:
        raise CLIError(f"{exc}")
    except NoUnsatPointError as exc:
        raise CLIError(f"no instanton exists: {exc}")
    except AmoebaNotConverged as exc:
        raise CLIError(f"{exc}; raise max_iter or loosen tol")
    pshed = p_shed_estimate(spectrum, model)
    stress = stress_report(grid, model, spectrum)
    written = []
    if args.format == "csv":
        name = out / "spectrum.csv"
        write_atomic(name, spectrum_to_csv(spectrum, model))
    else:
        name = out / "spectrum.json"
        write_atomic(name, _dumps(spectrum_to_dict(spectrum, model, grid)))
    written.append(str(name))
    write_atomic(out / "stress.json", _dumps(stress.to_dict()))
    write_atomic(out / "pshed.json", _dumps(pshed.to_dict()))
    written += [str(out / "stress.json"), str(out / "pshed.json")]
    conf = cfg.to_dict()
    conf.update({"T": args.T, "half_max_load": args.half_max_load,
                 "initial_spread": cfg.initial_spread})
    man = RunManifest("instanton", _manifest_inputs(args), conf,
                      wall_clock_seconds=time.perf_counter() - t0,
                      runs=[o.stats() for o in spectrum.runs], outputs=written)
    write_atomic(out / "manifest.json", man.to_json())
    top = spectrum.top
    print(f"{len(spectrum)} distinct instantons from {spectrum.total_runs} runs "
          f"({spectrum.failed_runs} failed); top V = {top.value:.6g}")
    return EXIT_OK


def _parse_bus(text):
    try:
        return int(text)
    except ValueError:
        raise CLIError(f"bus id must be an integer, got {text!r}")


def cmd_scan2d(args):
    t0 = time.perf_counter()
    grid = _load(args)
    bi = _parse_bus(args.bus_i)
    bj = _parse_bus(args.bus_j) if args.bus_j is not None else None
    for b in (bi, bj):
        if b is not None and b not in grid.load_buses:
            raise CLIError(f"bus {b} is not a load bus")
    ranges = None
    if args.range:
        r = args.range
        if len(r) == 2:
            ranges = ((r[0], r[1]), (r[0], r[1]))
        elif len(r) == 4:
            ranges = ((r[0], r[1]), (r[2], r[3]))
        else:
            raise CLIError("--range takes LO HI or LO_I HI_I LO_J HI_J")
    try:
        raster = scan_2d(grid, bi, bj, ranges=ranges, resolution=args.res)
    except ValueError as exc:
        raise CLIError(str(exc))
    text = raster.to_csv() if args.format == "csv" else raster.to_json()
    if args.out:
        write_atomic(args.out, text)
        conf = {"bus_i": bi, "bus_j": bj, "range": args.range, "res": args.res,
                "half_max_load": args.half_max_load}
        man = RunManifest("scan2d", _manifest_inputs(args), conf,
                          wall_clock_seconds=time.perf_counter() - t0, outputs=[str(args.out)])
        write_atomic(str(args.out) + ".manifest.json", man.to_json())
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_reduce(args):
    t0 = time.perf_counter()
    grid = _load(args)
    if not 0 < args.factor < 1:
        raise CLIError(f"--factor must lie in (0, 1), got {args.factor}")
    buses = [_parse_bus(b) for b in args.buses.split(",") if b.strip()] if args.buses else []
    for b in buses:
        if b not in grid.load_buses:
            raise CLIError(f"bus {b} is not a load bus")
    model = DemandModel(grid.nominal_demand)
    status = EXIT_OK
    try:
        new = reduce_nominal(grid, model, buses, args.factor)
        dbar = new.dbar
    except NominalUnsatError as exc:
        log.error("%s", exc)
        dbar = np.array(grid.nominal_demand, dtype=float)
        for b in buses:
            dbar[grid.load_index(b)] *= args.factor
        status = EXIT_UNSAT
    reduced = grid.with_nominal(dbar)
    write_atomic(args.out, dump_grid_json(reduced))
    res = evaluate(reduced, dbar)
    print(json.dumps({"sat": res.is_sat, "total_shed": res.total_shed}))
    conf = {"buses": buses, "factor": args.factor, "half_max_load": args.half_max_load}
    man = RunManifest("reduce", _manifest_inputs(args), conf,
                      wall_clock_seconds=time.perf_counter() - t0, outputs=[str(args.out)])
    write_atomic(str(args.out) + ".manifest.json", man.to_json())
    return status


# -- argument parsing ------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="gridinstanton", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--grid", required=True, help="grid file (.json native or .m case text)")
        sp.add_argument("--half-max-load", action="store_true",
                        help="use half of the file's load as the nominal demand")

    c = sub.add_parser("check", help="solve the load-shedding LP for one demand vector")
    common(c)
    c.add_argument("--demand", help="JSON list in load order, or {bus: MW}; default nominal")
    c.add_argument("--out", help="write the result here instead of stdout")
    c.set_defaults(func=cmd_check)

    s = sub.add_parser("instanton", help="multi-start instanton search")
    common(s)
    s.add_argument("--runs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--jobs", type=int)
    s.add_argument("--T", type=float, default=1.0, help="demand dispersion (reporting only)")
    s.add_argument("--dedup-delta", type=float)
    s.add_argument("--spread", type=float)
    s.add_argument("--tol", type=float)
    s.add_argument("--objective", choices=("radial", "sentinel"))
    s.add_argument("--config", help="JSON search configuration; flags override it")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--format", choices=("json", "csv"), default="json")
    s.set_defaults(func=cmd_instanton)

    r = sub.add_parser("scan2d", help="classify a plane of demand pairs")
    common(r)
    r.add_argument("--bus-i", required=True)
    r.add_argument("--bus-j", help="second load bus; omit for a dummy axis")
    r.add_argument("--range", type=float, nargs="+", metavar="X",
                   help="LO HI for both axes, or LO_I HI_I LO_J HI_J")
    r.add_argument("--res", type=int, default=100)
    r.add_argument("--format", choices=("json", "csv"), default="json")
    r.add_argument("--out")
    r.set_defaults(func=cmd_scan2d)

    d = sub.add_parser("reduce", help="scale the nominal demand of chosen loads")
    common(d)
    d.add_argument("--buses", default="", help="comma-separated load bus ids")
    d.add_argument("--factor", type=float, default=0.5)
    d.add_argument("--out", required=True, help="reduced grid JSON")
    d.set_defaults(func=cmd_reduce)
    return p


def main(argv=None):
    level = os.environ.get("GRIDINSTANTON_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; 2 means UNSAT here
        return EXIT_OK if exc.code == 0 else EXIT_ERROR
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
