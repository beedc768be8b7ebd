import csv
import io
import json
import math

import numpy as np
import pytest

from gridinstanton.analysis import (
    EXCLUDED,
    SAT,
    UNSAT,
    deviated_loads,
    p_shed_estimate,
    reduce_nominal,
    scan_2d,
    spectrum_to_csv,
    spectrum_to_dict,
    stress_report,
)
from gridinstanton.demand import DemandModel, instanton_value, log_prob
from gridinstanton.search import Instanton, InstantonSpectrum, NominalUnsatError, SearchConfig, multi_start


def fake_spectrum(points, counts, total, failed=0):
    insts = tuple(
        Instanton(np.asarray(p, dtype=float), v, np.asarray(p, dtype=float), c, runs=())
        for (p, v), c in zip(points, counts)
    )
    return InstantonSpectrum(insts, total, failed, 1e-3)


@pytest.fixture(scope="module")
def triangle_spectrum(triangle):
    m = DemandModel([2.0, 2.0])
    return m, multi_start(triangle, m, SearchConfig(runs=8, seed=3))


def test_pshed_terms_by_hand():
    m = DemandModel([1.0, 1.0], T=0.5)
    pts = [([2.0, 1.0], 0.5), ([1.0, 3.0], 2.0)]
    spec = fake_spectrum(pts, [3, 1], total=5, failed=1)
    est = p_shed_estimate(spec, m)
    by_hand = [0.6 * math.exp(log_prob([2.0, 1.0], m)), 0.2 * math.exp(log_prob([1.0, 3.0], m))]
    assert [t.term for t in est.terms] == pytest.approx(by_hand, rel=1e-12)
    assert est.total == pytest.approx(sum(by_hand), rel=1e-12)
    assert sum(t.mu for t in est.terms) == pytest.approx(0.8)
    assert [t.rank for t in est.terms] == [1, 2]


def test_pshed_ordered_by_v_even_when_mu_disagrees():
    m = DemandModel([1.0, 1.0], T=1.0)
    pts = [([1.5, 1.0], 0.125), ([1.0, 1.6], 0.18)]
    est = p_shed_estimate(fake_spectrum(pts, [1, 9], total=10), m)
    assert [t.value for t in est.terms] == [0.125, 0.18]


def test_pshed_small_t_stays_finite():
    m = DemandModel([1.0], T=1e-4)
    est = p_shed_estimate(fake_spectrum([([3.0], 2.0)], [1], total=1), m.with_T(1e-4))
    assert est.total == 0.0  # underflows as a float
    assert math.isfinite(est.log_total) and est.log_total < -1e4


def test_pshed_empty_spectrum():
    with pytest.raises(ValueError):
        p_shed_estimate(InstantonSpectrum((), 1, 1, 1e-3), DemandModel([1.0]))


def test_pshed_decreases_with_t(triangle_spectrum):
    m, spec = triangle_spectrum
    totals = [p_shed_estimate(spec, m.with_T(T)).log_total for T in (1.0, 0.5, 0.25)]
    assert totals[0] > totals[1] > totals[2]


def test_pshed_t_condition():
    # d/dT log density = V/T**2 - N/(2T): positive only while V > N T / 2
    m = DemandModel([1.0] * 4)
    low = fake_spectrum([([1.5, 1, 1, 1], 0.125)], [1], 1)
    vals = [p_shed_estimate(low, m.with_T(T)).log_total for T in (1.0, 0.5, 0.25)]
    assert vals[0] < vals[1] < vals[2]


def test_spectrum_tables(triangle, triangle_spectrum):
    m, spec = triangle_spectrum
    rows = list(csv.reader(io.StringIO(spectrum_to_csv(spec, m))))
    assert rows[0] == ["rank", "V", "minus_T_log_P", "count"]
    assert len(rows) == len(spec) + 1
    assert float(rows[1][1]) == spec.top.value
    d = spectrum_to_dict(spec, m, triangle)
    json.dumps(d)
    assert d["instantons"][0]["demand"] == {"1": spec.top.demand[0], "2": spec.top.demand[1]}
    # -T log P differs from V by the same constant for every instanton
    offs = {round(float(r[2]) - float(r[1]), 9) for r in rows[1:]}
    assert len(offs) == 1


def test_deviated_loads(triangle):
    m = DemandModel([5.0, 5.0])
    buses, dev = deviated_loads([5.4, 6.0], m, triangle)
    assert buses == (2,) and dev == {2: pytest.approx(0.2)}
    assert deviated_loads([5.0, 5.0], m, triangle)[0] == ()


def test_stress_report(triangle):
    m = DemandModel([7.0, 3.0])
    spec = multi_start(triangle, m, SearchConfig(runs=4))
    rep = stress_report(triangle, m, spec)
    assert rep.baseline_saturated == ()
    top = rep.instantons[0]
    assert top.value == spec.top.value
    assert top.saturated_lines == ("1-2",) and top.newly_saturated == ("1-2",)
    assert set(top.deviated_buses) == {1, 2}
    assert sum(top.generator_tally.values()) == triangle.n_gens
    json.dumps(rep.to_dict())
    assert stress_report(triangle, m, spec, top_k=0).instantons == ()
    with pytest.raises(ValueError):
        stress_report(triangle, m, spec, top_k=len(spec) + 1)


def test_stress_baseline_lines_not_new(triangle):
    # nominal already loads line 1-2 to its limit
    m = DemandModel([8.0, 2.0])
    spec = multi_start(triangle, m, SearchConfig(runs=2))
    rep = stress_report(triangle, m, spec)
    assert rep.baseline_saturated == ("1-2",)
    assert "1-2" not in rep.instantons[0].newly_saturated


def test_reduce_nominal(triangle):
    m = DemandModel([5.0, 5.0], T=0.3)
    red = reduce_nominal(triangle, m, [2], 0.5)
    assert red.dbar.tolist() == [5.0, 2.5] and red.T == 0.3
    for bad in (0.0, 1.0, 1.5):
        with pytest.raises(ValueError):
            reduce_nominal(triangle, m, [2], bad)
    with pytest.raises(NominalUnsatError):
        reduce_nominal(triangle, DemandModel([8.0, 2.5]), [2], 0.5)
    with pytest.raises(KeyError):
        reduce_nominal(triangle, m, [99], 0.5)


def test_scan_flags_match_closed_form(triangle):
    r = scan_2d(triangle, 1, 2, ranges=((0, 15), (0, 15)), resolution=60)
    X, Y = np.meshgrid(r.xs, r.ys)
    expect = (X + Y <= 14) & (np.abs(X - Y) <= 6)
    assert np.array_equal(r.flags == SAT, expect)
    assert r.flags.shape == (60, 60)
    assert r.boundary and all(len(line) >= 2 for line in r.boundary)


def test_scan_boundary_lies_between_classes(triangle):
    r = scan_2d(triangle, 1, 2, ranges=((0, 15), (0, 15)), resolution=30)
    dx, dy = r.cell_size
    for line in r.boundary:
        for x, y in line:
            # every boundary vertex sits on a cell corner
            assert abs((x - r.xs[0] + dx / 2) / dx - round((x - r.xs[0] + dx / 2) / dx)) < 1e-9
            assert abs((y - r.ys[0] + dy / 2) / dy - round((y - r.ys[0] + dy / 2) / dy)) < 1e-9


def test_scan_excludes_negative_and_dummy_axis(triangle):
    r = scan_2d(triangle, 1, 2, ranges=((-2, 10), (0, 10)), resolution=(12, 5))
    assert r.flags.shape == (5, 12)
    assert np.all(r.flags[:, r.xs < 0] == EXCLUDED)
    one = scan_2d(triangle, 1, frozen=[5.0, 5.0], ranges=((0, 15), (0, 1)), resolution=(30, 2))
    assert one.bus_j is None
    assert np.array_equal(one.flags[0], one.flags[1])
    assert set(np.unique(one.flags)) == {SAT, UNSAT}


def test_scan_validation(triangle):
    with pytest.raises(ValueError):
        scan_2d(triangle, 1, 1)
    with pytest.raises(ValueError):
        scan_2d(triangle, 1, 2, resolution=1)
    with pytest.raises(ValueError):
        scan_2d(triangle, 1, 2, ranges=((1, 0), (0, 1)))
    with pytest.raises(KeyError):
        scan_2d(triangle, 1, 7)


def test_scan_serialisation(triangle):
    r = scan_2d(triangle, 1, 2, resolution=4)
    rows = list(csv.reader(io.StringIO(r.to_csv())))
    assert rows[0] == ["d_i", "d_j", "sat"] and len(rows) == 17
    back = json.loads(r.to_json())
    assert back["flags"] == r.flags.tolist() and back["bus_i"] == 1


def test_instanton_value_matches_reported(triangle_spectrum):
    m, spec = triangle_spectrum
    for inst in spec:
        assert inst.value == pytest.approx(instanton_value(inst.demand, m), rel=1e-12)
