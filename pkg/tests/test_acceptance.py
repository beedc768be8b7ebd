"""Acceptance criteria, one test each, with a PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the lines are also
repeated in the terminal summary of a normal run.
"""

import time

import numpy as np
import pytest

from gridinstanton.analysis import UNSAT, deviated_loads, p_shed_estimate, reduce_nominal, scan_2d
from gridinstanton.cli import main as cli_main
from gridinstanton.demand import DemandModel
from gridinstanton.feasibility import ShedEvaluator, evaluate
from gridinstanton.grid import Grid
from gridinstanton.search import SearchConfig, multi_start

from conftest import BALANCE_TOL, DC_TOL, data_path, record_criterion

# Points on the triangle fixture (loads at buses 1 and 2) that show the
# counter-intuitive moves; the SAT set is {d1 + d2 <= 14, |d1 - d2| <= 6}.
SAT_THEN_LESS_LOAD = ((9.0, 3.5), (9.0, 2.5))  # load 2 drops, SAT -> UNSAT
UNSAT_THEN_MORE_LOAD = ((9.0, 2.0), (9.5, 4.0))  # both loads rise, UNSAT -> SAT

# Three nominal points with 400 x 400 scan windows that contain the nearest
# UNSAT cell: both loads up, load 2 down, load 1 down.
ORACLE_NOMINALS = [
    ((5.0, 5.0), ((3.0, 10.0), (3.0, 10.0))),
    ((7.0, 3.0), ((5.0, 11.0), (0.5, 5.0))),
    ((2.0, 6.0), ((0.0, 4.0), (4.0, 10.0))),
]


def check(name, ok, detail):
    line = record_criterion(name, ok, detail)
    assert ok, line


def scan_min_v(grid, dbar, ranges, resolution=400):
    r = scan_2d(grid, grid.load_buses[0], grid.load_buses[1], ranges=ranges, resolution=resolution)
    X, Y = np.meshgrid(r.xs, r.ys)
    V = 0.5 * ((X / dbar[0] - 1.0) ** 2 + (Y / dbar[1] - 1.0) ** 2)
    unsat = r.flags == UNSAT
    return float(V[unsat].min()), r


def sample_sat(ev, lo, hi, n, rng):
    pts = []
    while len(pts) < n:
        d = rng.uniform(lo, hi)
        if ev.is_sat(d).is_sat:
            pts.append(d)
    return np.array(pts)


def test_two_bus_closed_form():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for P, u, d in rng.uniform(0.0, 20.0, size=(100, 3)):
        g = Grid([1, 2], [(1, 2)], [1.0], [u], [1], [P], [2], [d])
        worst = max(worst, abs(evaluate(g, [d]).total_shed - max(0.0, d - min(u, P))))
    dt = time.perf_counter() - t0
    check("two-bus closed form", worst <= 1e-9 and dt < 1.0,
          f"100 points, max error {worst:.2e}, {dt:.2f} s")


def test_conservation(conservation, triangle, rts96):
    # the autouse hook checks every LP solve in every test; this one adds a mixed workload
    rng = np.random.default_rng(5)
    for _ in range(150):
        evaluate(rts96, rts96.nominal_demand * rng.uniform(0.0, 2.5, rts96.n_loads))
    ShedEvaluator(triangle).classify_many(rng.uniform(0, 15, size=(500, 2)))
    ok = conservation.checked > 150 and conservation.worst_balance <= BALANCE_TOL \
        and conservation.worst_dc <= DC_TOL
    check("conservation", ok,
          f"{conservation.checked} solves, balance {conservation.worst_balance:.1e}, "
          f"phase/flow {conservation.worst_dc:.1e} (every solve in every test is hooked)")


def test_sat_region_convexity(triangle, rts96):
    rng = np.random.default_rng(11)
    t0 = time.perf_counter()
    results = []
    ev = ShedEvaluator(triangle)
    A = sample_sat(ev, [0, 0], [15, 15], 1000, rng)
    B = sample_sat(ev, [0, 0], [15, 15], 1000, rng)
    results.append(sum(ev.is_sat(m).is_sat for m in 0.5 * (A + B)))
    # two loads of the three-area case, everything else at half its file load
    base = 0.5 * np.asarray(rts96.nominal_demand)
    i, j = rts96.load_index(101), rts96.load_index(102)
    ev = ShedEvaluator(rts96)

    def slice_point(x):
        d = base.copy()
        d[[i, j]] = x
        return d

    hi = 6.0 * base[[i, j]]

    class Slice:
        def is_sat(self, x):
            return ev.is_sat(slice_point(x))

    A = sample_sat(Slice(), [0, 0], hi, 1000, rng)
    B = sample_sat(Slice(), [0, 0], hi, 1000, rng)
    results.append(sum(ev.is_sat(slice_point(m)).is_sat for m in 0.5 * (A + B)))
    dt = time.perf_counter() - t0
    check("SAT-region convexity", results == [1000, 1000] and dt < 30.0,
          f"midpoints SAT: triangle {results[0]}/1000, RTS-96 101-102 slice {results[1]}/1000, {dt:.1f} s")


def test_triangle_phenomena(triangle):
    ev = ShedEvaluator(triangle)
    (a, a2), (b, b2) = SAT_THEN_LESS_LOAD, UNSAT_THEN_MORE_LOAD
    pts_ok = (ev.is_sat(a).is_sat and not ev.is_sat(a2).is_sat
              and not ev.is_sat(b).is_sat and ev.is_sat(b2).is_sat)
    # and on the scan itself: neighbouring cells showing each move
    r = scan_2d(triangle, 1, 2, ranges=((0, 15), (0, 15)), resolution=100)
    sat = r.flags == 1
    drop = np.argwhere(sat[1:, :] & ~sat[:-1, :])  # SAT cell above an UNSAT one: less load 2 fails
    # UNSAT cell with a SAT cell one step right and three steps up: both loads rise
    rise = np.argwhere(~sat[:-3, :-1] & sat[3:, 1:])
    ok = pts_ok and len(drop) > 0 and len(rise) > 0
    detail = (f"{a}->{a2} SAT->UNSAT, {b}->{b2} UNSAT->SAT; scan has {len(drop)} decrease-breaks "
              f"and {len(rise)} increase-repairs")
    check("triangle phenomena", ok, detail)


def test_oracle_equivalence_2d(triangle):
    t0 = time.perf_counter()
    rows = []
    ok = True
    for dbar, ranges in ORACLE_NOMINALS:
        m = DemandModel(dbar)
        top = multi_start(triangle, m, SearchConfig(runs=10, seed=1)).top.value
        oracle, _ = scan_min_v(triangle, dbar, ranges)
        rel = abs(top - oracle) / oracle
        ok &= rel <= 0.02
        rows.append(f"{dbar}: search {top:.5f} scan {oracle:.5f} ({100 * rel:.2f}%)")
    dt = time.perf_counter() - t0
    check("2-D oracle equivalence", ok and dt < 120.0, "; ".join(rows) + f"; {dt:.1f} s")


def test_one_dimensional_analytic(toy):
    dbar = float(toy.nominal_demand[0])
    u = float(toy.line_capacity[0])
    edge = min(u, float(toy.gen_capacity[0]))
    spec = multi_start(toy, DemandModel([dbar]), SearchConfig(runs=3))
    d = float(spec.top.demand[0])
    v_exact = 0.5 * (edge / dbar - 1.0) ** 2
    err_d = abs(d - edge) / edge
    err_v = abs(spec.top.value - v_exact)
    check("1-D analytic instanton", err_d <= 1e-4 and err_v <= 1e-6,
          f"surface at {edge:g}, found {d:.9g} (rel {err_d:.1e}), V error {err_v:.1e}")


@pytest.fixture(scope="module")
def rts_spectrum(rts96):
    model = DemandModel(0.5 * np.asarray(rts96.nominal_demand))
    t0 = time.perf_counter()
    spec = multi_start(rts96, model, SearchConfig(runs=50, seed=0))
    return model, spec, time.perf_counter() - t0


def test_rts96_reproduction(rts96, rts_spectrum):
    model, spec, dt = rts_spectrum
    ev = ShedEvaluator(rts96.with_nominal(model.dbar))
    bracket_ok = True
    for inst in spec:
        rel = np.abs(inst.demand - inst.surface_witness)[model.active] / model.dbar[model.active]
        bracket_ok &= (not ev.is_sat(inst.demand).is_sat) and ev.is_sat(inst.surface_witness).is_sat \
            and rel.max() <= SearchConfig().surface_eps
    buses, _ = deviated_loads(spec.top.demand, model, rts96)
    shape = (rts96.n_buses, rts96.n_lines)
    ok = shape == (73, 120) and len(spec) >= 5 and bracket_ok and len(buses) <= 10 and dt < 600
    check("RTS-96 reproduction", ok,
          f"{shape[0]} buses/{shape[1]} lines; {len(spec)} distinct instantons from 50 runs "
          f"({spec.failed_runs} failed); brackets {'ok' if bracket_ok else 'BROKEN'}; "
          f"top V {spec.top.value:.4f} deviates {len(buses)} of {rts96.n_loads} loads {list(buses)}; "
          f"{dt:.0f} s")


def test_pshed_properties(triangle, rts_spectrum):
    # with the normalised density, log P at an instanton grows as T shrinks
    # unless V > N T / 2; this nominal keeps every instanton above that line at T <= 1
    m = DemandModel([2.0, 2.0])
    spec = multi_start(triangle, m, SearchConfig(runs=20, seed=4))
    ests = [p_shed_estimate(spec, m.with_T(T)) for T in (1.0, 0.5, 0.25)]
    ordered = all([t.value for t in e.terms] == sorted(t.value for t in e.terms) for e in ests)
    totals = [e.log_total for e in ests]
    decreasing = totals[0] > totals[1] > totals[2]
    rmodel, rspec, _ = rts_spectrum
    rest = p_shed_estimate(rspec, rmodel)
    mu_ok = True
    for s, e in ((spec, ests[0]), (rspec, rest)):
        want = (s.total_runs - s.failed_runs) / s.total_runs
        mu_ok &= abs(sum(t.mu for t in e.terms) - want) <= 1e-12
    ordered &= [t.value for t in rest.terms] == sorted(t.value for t in rest.terms)
    check("P_shed estimator properties", ordered and decreasing and mu_ok,
          f"terms by V: {ordered}; log P_shed at T=1,0.5,0.25: "
          + ", ".join(f"{v:.3f}" for v in totals)
          + f"; mu sums ok: {mu_ok} ({len(spec)} triangle and {len(rspec)} RTS-96 instantons)")


def test_determinism(tmp_path):
    grid = data_path("triangle.json")
    outs = {}
    for tag, jobs in (("a", "1"), ("b", "1"), ("c", "3"), ("d", "3")):
        d = tmp_path / tag
        code = cli_main(["instanton", "--grid", grid, "--runs", "8", "--seed", "17", "--jobs", jobs,
                         "--out", str(d)])
        assert code == 0
        outs[tag] = (d / "spectrum.json").read_bytes()
    same = outs["a"] == outs["b"] and outs["c"] == outs["d"] and outs["a"] == outs["c"]
    check("determinism", same, "spectrum.json byte-identical for --jobs 1 twice and --jobs 3 twice")


def test_iterative_reduction(triangle):
    # the top instanton of this nominal deviates load 1 only
    dbar = (8.0, 3.0)
    m = DemandModel(dbar)
    spec = multi_start(triangle, m, SearchConfig(runs=10, seed=2))
    buses, _ = deviated_loads(spec.top.demand, m, triangle)
    m2 = reduce_nominal(triangle, m, buses, 0.5)
    spec2 = multi_start(triangle, m2, SearchConfig(runs=10, seed=2))
    oracle1, _ = scan_min_v(triangle, m.dbar, ((6.0, 11.0), (1.0, 5.0)))
    oracle2, _ = scan_min_v(triangle, m2.dbar, ((2.0, 10.0), (0.0, 5.0)))
    v1, v2 = spec.top.value, spec2.top.value
    ok = (buses == (1,) and v2 >= v1 and abs(v1 - oracle1) <= 0.02 * oracle1
          and abs(v2 - oracle2) <= 0.02 * oracle2)
    check("iterative reduction", ok,
          f"top V {v1:.5f} (scan {oracle1:.5f}) deviates {list(buses)}; after halving: "
          f"top V {v2:.5f} (scan {oracle2:.5f}), nominal {m2.dbar.tolist()}")
