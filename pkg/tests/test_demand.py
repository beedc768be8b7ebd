import numpy as np
import pytest
from scipy.stats import norm

from gridinstanton.demand import (
    SAT_SENTINEL,
    DemandModel,
    instanton_value,
    log_prob,
    objective,
)


def test_value_at_nominal_is_zero():
    m = DemandModel([2.0, 5.0, 1.0], T=0.3)
    assert instanton_value(m.dbar, m) == 0.0


def test_value_by_hand():
    m = DemandModel([2.0, 4.0])
    assert instanton_value([3.0, 2.0], m) == pytest.approx(0.5 * (0.5**2 + 0.5**2))


def test_log_prob_matches_independent_normals():
    dbar = np.array([2.0, 5.0, 0.5])
    T = 0.2
    m = DemandModel(dbar, T)
    d = np.array([2.5, 4.0, 0.9])
    expect = norm.logpdf(d, loc=dbar, scale=np.sqrt(T) * dbar).sum()
    assert log_prob(d, m) == pytest.approx(expect, rel=1e-12)


def test_log_prob_is_minus_v_over_t_plus_const():
    m = DemandModel([1.0, 3.0], T=0.5)
    a, b = np.array([1.2, 2.0]), np.array([0.4, 3.3])
    diff = log_prob(a, m) - log_prob(b, m)
    assert diff == pytest.approx(-(instanton_value(a, m) - instanton_value(b, m)) / m.T)


def test_zero_nominal_loads_are_frozen_out():
    m = DemandModel([0.0, 2.0])
    assert m.n_active == 1
    assert instanton_value([7.0, 3.0], m) == pytest.approx(0.125)
    assert m.relative([7.0, 3.0]).tolist() == [1.5]


@pytest.mark.parametrize("dbar,T", [([1.0, -1.0], 1.0), ([1.0, np.nan], 1.0), ([1.0], 0.0), ([1.0], -2.0)])
def test_model_validation(dbar, T):
    with pytest.raises(ValueError):
        DemandModel(dbar, T)


def test_wrong_length_rejected():
    with pytest.raises(ValueError):
        instanton_value([1.0], DemandModel([1.0, 2.0]))


def test_model_equality_and_with_t():
    a = DemandModel([1.0, 2.0], 0.5)
    assert a == DemandModel(np.array([1.0, 2.0]), 0.5)
    assert a.with_T(0.25).T == 0.25 and a.with_T(0.25) != a
    assert hash(a) == hash(DemandModel([1.0, 2.0], 0.5))


def test_objective_sentinel_and_value(triangle):
    m = DemandModel(triangle.nominal_demand)
    assert objective([5.0, 5.0], triangle, m) is SAT_SENTINEL
    v = objective([9.0, 2.0], triangle, m)
    assert v.is_finite and v.value == pytest.approx(instanton_value([9.0, 2.0], m))
    with pytest.raises(ValueError):
        objective([-1.0, 2.0], triangle, m)
