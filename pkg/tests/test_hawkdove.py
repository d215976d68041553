from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfmdeg import hawkdove as hd
from mfmdeg import meanfield as mf
from mfmdeg.model import ModelError

U = st.floats(0.0, 1.0)


def kernel_of(dynamics="quadratic", levels=2):
    spec = hd.build_model(hd.HawkDoveParams(levels=levels, dynamics=dynamics))
    return lambda states, actions: dict(spec.kernel(2, (1, 1), states, actions))


def test_table_hawk_hawk_at_top():
    out = kernel_of("table")((2, 2), ("H", "H"))
    assert out == pytest.approx({(2, 1): 0.5, (1, 2): 0.5})


def test_quadratic_hawk_hawk_loser_drops_half_the_time():
    out = kernel_of("quadratic")((2, 2), ("H", "H"))
    assert out == pytest.approx({(2, 1): 0.25, (1, 2): 0.25, (2, 2): 0.5})


def test_dove_against_hawk_at_top():
    assert kernel_of("table")((2, 2), ("D", "H")) == pytest.approx({(1, 2): 1.0})
    # a level-2 loser facing a level-2 opponent drops only half the time
    assert kernel_of("quadratic")((2, 2), ("D", "H")) == pytest.approx({(1, 2): 0.5, (2, 2): 0.5})


def test_level_one_dove_climbs_quarter_of_the_time():
    out = kernel_of("quadratic")((1, 2), ("D", "H"))
    assert out == pytest.approx({(1, 2): 0.75, (2, 2): 0.25})
    assert kernel_of("table")((1, 2), ("D", "H")) == pytest.approx({(1, 2): 1.0})


def test_pair_gains():
    spec = hd.build_model(v_bar=1.0, c=0.6)
    g = spec.gain
    assert g((1, 2), "H", 2, [(1, 2)], ["H"], [1]) == pytest.approx(-0.1)
    assert g((1, 2), "H", 2, [(1, 1)], ["D"], [1]) == 1.0
    assert g((1, 1), "D", 1, [(1, 2)], ["H"], [2]) == 0.0
    assert g((1, 1), "D", 1, [(1, 1)], ["D"], [1]) == 0.5


def test_three_level_kernel():
    spec = hd.build_model(hd.HawkDoveParams(levels=3))
    assert dict(spec.kernel(2, (1, 1), (0, 1), (None, "H"))) == {(0, 2): 1.0}
    assert dict(spec.kernel(2, (1, 1), (1, 1), ("H", "D"))) == {(2, 0): 1.0}
    assert dict(spec.kernel(2, (1, 1), (2, 2), ("H", "H"))) == pytest.approx({(2, 1): 0.5, (1, 2): 0.5})


def test_gain_bound_property():
    assert hd.HawkDoveParams(v_bar=1.0, c=3.0).gain_bound == 2.5
    assert hd.HawkDoveParams(v_bar=1.0, c=0.6).gain_bound == 1.0


def test_closed_form_fixed_point_u1():
    t = np.linspace(0, 10, 11)
    assert np.allclose(hd.closed_form_m2(1.0, 2 / 3, t), 2 / 3, atol=1e-15)


def test_closed_form_limit_u1():
    assert hd.closed_form_m2(1.0, 0.0, 60.0) == pytest.approx(2 / 3, abs=1e-15)


def test_closed_form_constants_u0():
    c = hd.closed_form_constants(0.0, 0.0)
    assert c.gamma_minus == pytest.approx(2 - math.sqrt(2), abs=1e-14)
    assert c.gamma_plus == pytest.approx(2 + math.sqrt(2), abs=1e-14)
    assert c.lam == pytest.approx(math.sqrt(2), abs=1e-14)


def test_closed_form_value_u0_t1():
    # frozen from a halved-step RK4 run (0.46267099406153844 at h = 1e-3)
    assert hd.closed_form_m2(0.0, 0.0, 1.0) == pytest.approx(0.46267099406154, abs=1e-9)


def test_gamma_minus_continuous_at_one():
    assert abs(hd.gamma_minus(1 - 1e-6) - 2 / 3) < 1e-4
    assert math.isinf(hd.gamma_plus(1.0))


@given(U, U)
def test_closed_form_starts_at_m0(u2, m0):
    assert hd.closed_form_m2(u2, m0, 0.0) == pytest.approx(m0, abs=1e-12)


@given(U, st.floats(0.0, 0.5))
def test_closed_form_monotone_below_attractor(u2, m0):
    t = np.linspace(0, 20, 401)
    m = hd.closed_form_m2(u2, m0, t)
    assert np.all(np.diff(m) >= -1e-14)
    assert m[-1] <= hd.gamma_minus(u2) + 1e-12


def test_uncorrected_logistic_misses_initial_value():
    # regression witness: the uncorrected constants return 2 g- - m0 at t = 0
    miss = abs(hd.logistic_m2_uncorrected(0.0, 0.0, 0.0) - 0.0)
    assert miss > 0.1
    assert miss == pytest.approx(2 * (2 - math.sqrt(2)), abs=1e-12)


def test_closed_form_rejects_bad_u2():
    with pytest.raises(ModelError):
        hd.closed_form_m2(1.5, 0.0, 1.0)


def test_field_coefficients_example():
    assert hd.field_m2(0.5, 0.4) == pytest.approx(0.34, abs=1e-15)
    assert hd.quadratic_coefficients(0.5) == pytest.approx((1.0, -1.75, 0.25))


def test_instant_payoffs_dove():
    r1, r2 = hd.instant_payoffs(0.0, 0.7, 0.4, v_bar=1.3, c=0.9)
    assert r1 == r2 == pytest.approx(0.5 * (1 - 0.28) * 1.3)


def test_instant_payoffs_hawk_example():
    assert hd.instant_payoffs(1.0, 1.0, 2 / 3, 1.0, 1.0)[1] == pytest.approx(1 / 3)


def test_instant_payoffs_no_hawks():
    assert hd.instant_payoffs(0.3, 0.0, 0.8, v_bar=2.0)[0] == 1.0


def test_beta2_examples():
    assert hd.beta2(1.0, 2 / 3, 1.0, 1.0) == pytest.approx(1 / 6)
    assert hd.beta2(1.0, 2 / 3, 0.5, 1.0) == pytest.approx(-0.25)


def test_beta2_best_response_and_tie():
    p = hd.HawkDoveParams(v_bar=1.0, c=1.0)
    assert hd.beta2_and_best_response(p, 1.0, 2 / 3, 0.0).action == "hawk"
    p = hd.HawkDoveParams(v_bar=0.5, c=1.0)
    assert hd.beta2_and_best_response(p, 1.0, 2 / 3, 0.0).action == "dove"
    # g = 1 with v_bar = c: 0.5 * 2 - 1 = 0 exactly
    p = hd.HawkDoveParams(v_bar=1.0, c=1.0)
    assert hd.beta2_and_best_response(p, 1.0, 1.0, 0.0).action == "indifferent"


def test_beta2_crossing_time():
    # v_bar = 1, c = 2: the sign flips at g = 1/3 on the way from 0 to 2/3
    p = hd.HawkDoveParams(v_bar=1.0, c=2.0)
    res = hd.beta2_and_best_response(p, 1.0, 0.0, 0.0)
    assert res.sign_at_start == "hawk" and res.sign_at_infinity == "dove"
    assert hd.closed_form_m2(1.0, 0.0, res.crossing_time) == pytest.approx(1 / 3, abs=1e-9)


@settings(max_examples=200)
@given(st.floats(0.01, 5), st.floats(0.01, 5), U, U)
def test_beta2_is_payoff_difference(v_bar, c, m2, u2):
    d = hd.instant_payoffs(1.0, u2, m2, v_bar, c)[1] - hd.instant_payoffs(0.0, u2, m2, v_bar, c)[1]
    assert d == pytest.approx(hd.beta2(u2, m2, v_bar, c), abs=1e-12)


def test_threshold_holds():
    rep = hd.equilibrium_threshold_check(hd.HawkDoveParams(v_bar=1.5, c=1.0))
    assert rep.threshold_holds and rep.message.startswith("threshold holds")
    assert rep.certificate.epsilon < 1e-3
    assert rep.agrees


def test_threshold_fails():
    rep = hd.equilibrium_threshold_check(hd.HawkDoveParams(v_bar=1.0, c=1.0))
    assert not rep.threshold_holds
    assert "not guaranteed by threshold" in rep.message


def test_threshold_boundary_sensitive():
    rep = hd.equilibrium_threshold_check(hd.HawkDoveParams(v_bar=4 / 3 + 1e-6, c=1.0))
    assert rep.threshold_holds
    assert rep.boundary_sensitive
    assert "numerically sensitive" in rep.message


@given(U, U, st.floats(0, 1), st.floats(0, 1), st.floats(0, 2), st.floats(0, 2))
def test_rate_expression_field_conserves_mass(v1, v2, a, b, mu1, mu2):
    m = np.array([a, b, 1.0]) / (a + b + 1.0)
    assert sum(hd.rate_expressions_field_3(v1, v2, m, mu1, mu2)) == pytest.approx(0.0, abs=1e-12)


def test_three_level_drift_conserves_mass():
    spec = hd.build_model(hd.HawkDoveParams(levels=3, mu1=0.3, mu2=0.2))
    u = hd.strategy(spec, 0.7, 0.4)
    f = mf.drift(spec, u, np.array([0.2, 0.3, 0.5]))
    assert abs(f.sum()) < 1e-14
