"""Grid data model, structural validation and file ingestion."""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components as _cc

log = logging.getLogger(__name__)

UNBOUNDED = "unbounded"

__all__ = [
    "Grid",
    "GridError",
    "GridValidationError",
    "Issue",
    "ValidationReport",
    "connected_components",
    "dump_grid_json",
    "grid_to_dict",
    "load_case_text",
    "load_grid",
    "load_grid_json",
    "validate",
]


class GridError(ValueError):
    """Malformed grid input (parse or schema problem)."""


@dataclass(frozen=True)
class Issue:
    severity: str
    message: str
    entity: str

    def __str__(self):
        return f"{self.severity}: {self.message} [{self.entity}]"


@dataclass(frozen=True)
class ValidationReport:
    issues: tuple = ()

    def __bool__(self):
        return bool(self.issues)

    def __len__(self):
        return len(self.issues)

    def __iter__(self):
        return iter(self.issues)

    @property
    def ok(self):
        return not self.issues

    def __str__(self):
        return "\n".join(str(i) for i in self.issues) or "ok"


class GridValidationError(GridError):
    def __init__(self, report: ValidationReport):
        super().__init__(f"grid violates structural invariants:\n{report}")
        self.report = report


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Grid:
    """Immutable DC network.

    Lines are undirected ``(from, to)`` pairs; the stored orientation only
    fixes the sign convention of flows.  ``circuits`` distinguishes parallel
    circuits between the same pair of buses.  Generator capacities of
    ``math.inf`` mean unbounded generation.
    """

    buses: tuple
    lines: tuple
    reactance: np.ndarray
    line_capacity: np.ndarray
    gen_buses: tuple = ()
    gen_capacity: np.ndarray = field(default_factory=lambda: _frozen([]))
    load_buses: tuple = ()
    nominal_demand: np.ndarray = field(default_factory=lambda: _frozen([]))
    circuits: tuple | None = None

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "buses", tuple(int(b) for b in self.buses))
        set_(self, "lines", tuple((int(a), int(b)) for a, b in self.lines))
        set_(self, "reactance", _frozen(self.reactance))
        set_(self, "line_capacity", _frozen(self.line_capacity))
        set_(self, "gen_buses", tuple(int(b) for b in self.gen_buses))
        set_(self, "gen_capacity", _frozen(self.gen_capacity))
        set_(self, "load_buses", tuple(int(b) for b in self.load_buses))
        set_(self, "nominal_demand", _frozen(self.nominal_demand))
        circuits = self.circuits
        if circuits is None:
            circuits = (1,) * len(self.lines)
        set_(self, "circuits", tuple(int(c) for c in circuits))
        if not (len(self.lines) == self.reactance.size == self.line_capacity.size == len(self.circuits)):
            raise GridError("per-line arrays must match the number of lines")
        if len(self.gen_buses) != self.gen_capacity.size:
            raise GridError("gen_capacity must match gen_buses")
        if len(self.load_buses) != self.nominal_demand.size:
            raise GridError("nominal_demand must match load_buses")
        set_(self, "_index", {b: i for i, b in enumerate(self.buses)})

    @property
    def n_buses(self):
        return len(self.buses)

    @property
    def n_lines(self):
        return len(self.lines)

    @property
    def n_loads(self):
        return len(self.load_buses)

    @property
    def n_gens(self):
        return len(self.gen_buses)

    def bus_index(self, bus_id):
        return self._index[int(bus_id)]

    def load_index(self, bus_id):
        try:
            return self.load_buses.index(int(bus_id))
        except ValueError:
            raise KeyError(f"bus {bus_id} is not a load bus") from None

    def line_label(self, k):
        a, b = self.lines[k]
        c = self.circuits[k]
        return f"{a}-{b}" if c == 1 else f"{a}-{b}#{c}"

    def with_nominal(self, nominal_demand):
        return Grid(
            self.buses, self.lines, self.reactance, self.line_capacity,
            self.gen_buses, self.gen_capacity, self.load_buses, nominal_demand,
            self.circuits,
        )

    def __eq__(self, other):
        if not isinstance(other, Grid):
            return NotImplemented
        return (
            self.buses == other.buses
            and self.lines == other.lines
            and self.circuits == other.circuits
            and self.gen_buses == other.gen_buses
            and self.load_buses == other.load_buses
            and np.array_equal(self.reactance, other.reactance)
            and np.array_equal(self.line_capacity, other.line_capacity)
            and np.array_equal(self.gen_capacity, other.gen_capacity)
            and np.array_equal(self.nominal_demand, other.nominal_demand)
        )

    def __hash__(self):
        return hash((self.buses, self.lines, self.circuits, self.gen_buses, self.load_buses))

    def __repr__(self):
        return (
            f"Grid(buses={self.n_buses}, lines={self.n_lines}, "
            f"generators={self.n_gens}, loads={self.n_loads})"
        )


def validate(grid: Grid) -> ValidationReport:
    issues = []
    known = set()
    for b in grid.buses:
        if b in known:
            issues.append(Issue("error", "duplicate bus id", f"bus {b}"))
        known.add(b)
    seen = {}
    for k, (a, b) in enumerate(grid.lines):
        ref = f"line {k} ({a}-{b})"
        if a == b:
            issues.append(Issue("error", "self-loop", ref))
        for end in (a, b):
            if end not in known:
                issues.append(Issue("error", f"line references unknown bus {end}", ref))
        key = (min(a, b), max(a, b), grid.circuits[k])
        if key in seen:
            issues.append(Issue("error", f"duplicate undirected edge (same as line {seen[key]})", ref))
        else:
            seen[key] = k
        x = grid.reactance[k]
        if not (x > 0) or not math.isfinite(x):
            issues.append(Issue("error", "reactance must be positive", ref))
        u = grid.line_capacity[k]
        if not (u >= 0):
            issues.append(Issue("error", "line capacity must be nonnegative", ref))
    for kind, buses in (("generator", grid.gen_buses), ("load", grid.load_buses)):
        dup = set()
        for b in buses:
            if b not in known:
                issues.append(Issue("error", f"{kind} bus not in bus list", f"bus {b}"))
            if b in dup:
                issues.append(Issue("error", f"duplicate {kind} entry", f"bus {b}"))
            dup.add(b)
    for b, P in zip(grid.gen_buses, grid.gen_capacity):
        if not (P >= 0):
            issues.append(Issue("error", "generation capacity must be nonnegative", f"bus {b}"))
    for b, d in zip(grid.load_buses, grid.nominal_demand):
        if not (d >= 0) or not math.isfinite(d):
            issues.append(Issue("error", "nominal demand must be finite and nonnegative", f"bus {b}"))
    return ValidationReport(tuple(issues))


def connected_components(grid: Grid):
    """Partition of bus ids, each component sorted, ordered by smallest id."""
    n = grid.n_buses
    if n == 0:
        return []
    rows = [grid.bus_index(a) for a, _ in grid.lines]
    cols = [grid.bus_index(b) for _, b in grid.lines]
    adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, labels = _cc(adj, directed=False)
    groups = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, []).append(grid.buses[i])
    comps = [tuple(sorted(g)) for g in groups.values()]
    comps.sort(key=lambda c: c[0])
    return comps


# -- native JSON ------------------------------------------------------------


def _field(obj, name, where, kind=(int, float)):
    if not isinstance(obj, dict) or name not in obj:
        raise GridError(f"{where}: missing field '{name}'")
    val = obj[name]
    if isinstance(val, bool) or not isinstance(val, kind):
        raise GridError(f"{where}: field '{name}' has wrong type ({type(val).__name__})")
    return val


def grid_from_dict(data) -> Grid:
    if not isinstance(data, dict):
        raise GridError("top-level JSON value must be an object")
    for key in ("buses", "lines"):
        if key not in data or not isinstance(data[key], list):
            raise GridError(f"missing or non-list field '{key}'")
    buses = [_field(b, "id", f"buses[{i}]", int) for i, b in enumerate(data["buses"])]
    lines, x, u, circuits = [], [], [], []
    for i, ln in enumerate(data["lines"]):
        where = f"lines[{i}]"
        lines.append((_field(ln, "from", where, int), _field(ln, "to", where, int)))
        x.append(float(_field(ln, "x", where)))
        u.append(float(_field(ln, "u", where)))
        circuits.append(int(ln.get("circuit", 1)) if isinstance(ln, dict) else 1)
    gens, caps = [], []
    for i, g in enumerate(data.get("generators", [])):
        where = f"generators[{i}]"
        gens.append(_field(g, "bus", where, int))
        P = g.get("P") if isinstance(g, dict) else None
        if P == UNBOUNDED:
            caps.append(math.inf)
        elif isinstance(P, (int, float)) and not isinstance(P, bool):
            caps.append(float(P))
        else:
            raise GridError(f"{where}: field 'P' must be a number or \"{UNBOUNDED}\"")
    loads, dbar = [], []
    for i, ld in enumerate(data.get("loads", [])):
        where = f"loads[{i}]"
        loads.append(_field(ld, "bus", where, int))
        dbar.append(float(_field(ld, "dbar", where)))
    return Grid(buses, lines, x, u, gens, caps, loads, dbar, circuits)


def _checked(grid: Grid) -> Grid:
    report = validate(grid)
    if report:
        raise GridValidationError(report)
    return grid


def load_grid_json(raw) -> Grid:
    """Parse native JSON (bytes or str) into a validated :class:`Grid`."""
    if isinstance(raw, (bytes, bytearray)):
        try:
            raw = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise GridError(f"input is not UTF-8: {exc}") from None
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise GridError(f"JSON parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return _checked(grid_from_dict(data))


def grid_to_dict(grid: Grid) -> dict:
    lines = []
    for k, (a, b) in enumerate(grid.lines):
        entry = {"from": a, "to": b, "x": float(grid.reactance[k]), "u": float(grid.line_capacity[k])}
        if grid.circuits[k] != 1:
            entry["circuit"] = grid.circuits[k]
        lines.append(entry)
    return {
        "buses": [{"id": b} for b in grid.buses],
        "lines": lines,
        "generators": [
            {"bus": b, "P": UNBOUNDED if math.isinf(P) else float(P)}
            for b, P in zip(grid.gen_buses, grid.gen_capacity)
        ],
        "loads": [{"bus": b, "dbar": float(d)} for b, d in zip(grid.load_buses, grid.nominal_demand)],
    }


def dump_grid_json(grid: Grid, indent=2) -> str:
    return json.dumps(grid_to_dict(grid), indent=indent) + "\n"


# -- matrix-style case text ---------------------------------------------------

_SECTION = re.compile(r"(?:\w+\.)?(\w+)\s*=\s*\[(.*?)\]\s*;?", re.S)
_WANTED = {"bus", "gen", "branch"}


def _rows(body, section):
    rows = []
    for ln in body.splitlines():
        ln = ln.split("%", 1)[0].strip()
        for chunk in ln.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            try:
                rows.append([float(tok) for tok in chunk.replace(",", " ").split()])
            except ValueError:
                raise GridError(f"{section} row {len(rows)}: non-numeric field in '{chunk}'") from None
    return rows


def load_case_text(text: str) -> Grid:
    """Read bus/gen/branch tables from a matrix-style power-case file.

    Only bus id and load (column 3), generator bus and Pmax (columns 1 and 9)
    and branch endpoints, reactance and long-term rating (columns 1, 2, 4, 6)
    are used.  A zero rating is taken literally: the branch cannot carry flow.
    Generators on the same bus are aggregated; parallel branches become
    separate circuits.
    """
    tables = {}
    for name, body in _SECTION.findall(text):
        if name in _WANTED:
            tables[name] = _rows(body, name)
        else:
            log.warning("skipping unsupported case section '%s'", name)
    for name in ("bus", "branch"):
        if name not in tables:
            raise GridError(f"case text has no '{name}' table")

    buses, loads, dbar = [], [], []
    for i, row in enumerate(tables["bus"]):
        if len(row) < 3:
            raise GridError(f"bus row {i}: expected at least 3 columns, got {len(row)}")
        bid = int(row[0])
        buses.append(bid)
        if row[2] > 0:
            loads.append(bid)
            dbar.append(row[2])

    cap = {}
    for i, row in enumerate(tables.get("gen", [])):
        if len(row) < 9:
            raise GridError(f"gen row {i}: expected at least 9 columns, got {len(row)}")
        if row[8] > 0:
            cap[int(row[0])] = cap.get(int(row[0]), 0.0) + row[8]
    gen_buses = [b for b in buses if b in cap]

    lines, x, u, circuits = [], [], [], []
    count = {}
    for i, row in enumerate(tables["branch"]):
        if len(row) < 6:
            raise GridError(f"branch row {i}: expected at least 6 columns, got {len(row)}")
        a, b = int(row[0]), int(row[1])
        key = (min(a, b), max(a, b))
        count[key] = count.get(key, 0) + 1
        lines.append((a, b))
        x.append(row[3])
        u.append(row[5])
        circuits.append(count[key])
    grid = Grid(buses, lines, x, u, gen_buses, [cap[b] for b in gen_buses], loads, dbar, circuits)
    return _checked(grid)


def load_grid(path) -> Grid:
    """Load a grid from ``path``: ``.m`` case text or native JSON."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if str(path).endswith(".m"):
        try:
            return load_case_text(raw.decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise GridError(f"input is not UTF-8: {exc}") from None
    return load_grid_json(raw)
