from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import constant_model, rotation_model, two_state_model
from mfmdeg import hawkdove as hd
from mfmdeg import meanfield as mf
from mfmdeg import microsim as ms
from mfmdeg.model import (
    GainFunction,
    InteractionLaw,
    ModelError,
    ModelSpec,
    StateSpace,
    StationaryStrategy,
    TransitionKernel,
)

U = st.floats(0.0, 1.0)


def hd_mass(q):
    return np.array([1.0 - q, q])


@given(U)
def test_drift_all_hawk_is_linear(q):
    spec = hd.build_model()
    f = mf.drift(spec, hd.strategy(spec, 1.0), hd_mass(q))
    assert f[1] == pytest.approx(1.0 - 1.5 * q, abs=1e-14)


@given(U)
def test_drift_vanishes_at_gamma_minus(u2):
    spec = hd.build_model()
    f = mf.drift(spec, hd.strategy(spec, u2), hd_mass(hd.gamma_minus(u2)))
    assert abs(f[1]) < 1e-13


def test_drift_coefficient_example():
    spec = hd.build_model()
    assert mf.drift(spec, hd.strategy(spec, 0.5), hd_mass(0.4))[1] == pytest.approx(0.34, abs=1e-14)


def test_table_dynamics_drift():
    spec = hd.build_model(dynamics="table")
    assert mf.drift(spec, hd.strategy(spec, 0.3), hd_mass(0.25))[1] == pytest.approx(0.5, abs=1e-14)


@settings(max_examples=60)
@given(U, U, st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 2), st.floats(0, 2))
def test_drift_conserves_mass_three_levels(v1, v2, a, b, c, mu1, mu2):
    if a + b + c == 0:
        return
    spec = hd.build_model(hd.HawkDoveParams(levels=3, mu1=mu1, mu2=mu2))
    m = np.array([a, b, c]) / (a + b + c)
    assert abs(mf.drift(spec, hd.strategy(spec, v2, v1), m).sum()) < 1e-12


def test_monte_carlo_drift_agrees():
    spec = hd.build_model()
    u = hd.strategy(spec, 0.5)
    m = hd_mass(0.4)
    exact = mf.drift(spec, u, m)
    n = 40_000
    mc = mf.drift(spec, u, m, mode="mc", samples=n, seed=3)
    # each event moves at most 2 units of mass, so the per-sample sd is below 2
    assert abs(mc[1] - exact[1]) < 3 * 2 / math.sqrt(n)


def test_enumeration_cap_message():
    spec = hd.build_model()
    with pytest.raises(ModelError, match="Monte Carlo drift mode"):
        mf.compile_model(spec, cap=3)


def test_microsim_one_step_drift():
    # N times the mean one-slot change of the m2 count fraction, brute force
    spec = hd.build_model()
    u = hd.strategy(spec, 0.5)
    N = 50
    counts = np.array([30, 20])
    R = 200_000
    res = ms.run_batch(spec, u, counts, N, 1, [(99, r) for r in range(R)])
    delta = res.final_players.__eq__(1).sum(axis=1) - counts[1]
    est = delta.mean()
    se = delta.std(ddof=1) / math.sqrt(R)
    exact = mf.drift(spec, u, counts / N)[1]
    # finite-N sampling without replacement shifts the mean by O(1/N)
    m2 = 0.4
    wo = 1 + (0.25 - 2) * m2 + 0.25 * m2 * (m2 * N - 1) / (N - 1)
    assert abs(est - wo) < 3 * se
    assert abs(exact - wo) < 0.01


def test_zero_drift_constant_trajectory():
    spec = constant_model()
    tr = mf.integrate_ode(spec, StationaryStrategy.uniform(spec.space), np.array([1.0]), 2.0)
    assert np.all(tr.mass == 1.0)


@pytest.mark.parametrize("m0", [0.0, 0.3, 2 / 3, 1.0])
def test_ode_matches_all_hawk_formula(m0):
    spec = hd.build_model()
    tr = mf.integrate_ode(spec, hd.strategy(spec, 1.0), hd_mass(m0), 10.0)
    t = tr.times
    ref = 2 / 3 * (1 - (1 - 1.5 * m0) * np.exp(-1.5 * t))
    assert np.max(np.abs(tr.component(1, 2) - ref)) < 1e-6
    assert tr.meta["error_estimate"] < 1e-9


def test_ode_u0_value_at_one():
    spec = hd.build_model()
    tr = mf.integrate_ode(spec, hd.strategy(spec, 0.0), hd_mass(0.0), 1.0)
    assert tr.component(1, 2)[-1] == pytest.approx(0.462671, abs=1e-6)
    assert tr.component(1, 2)[-1] == pytest.approx(hd.closed_form_m2(0.0, 0.0, 1.0), abs=1e-12)


def test_rk4_order():
    spec = hd.build_model()
    u = hd.strategy(spec, 0.0)
    ref = hd.closed_form_m2(0.0, 0.0, 2.0)
    errs = []
    for h in (0.2, 0.1, 0.05):
        tr = mf.integrate_ode(spec, u, hd_mass(0.0), 2.0, h=h, error_estimate=False)
        errs.append(abs(tr.component(1, 2)[-1] - ref))
    orders = [math.log2(errs[i] / errs[i + 1]) for i in range(2)]
    assert min(orders) >= 3.5


def test_ode_rejects_nonpositive_horizon():
    spec = hd.build_model()
    with pytest.raises(ModelError, match="horizon must be positive"):
        mf.integrate_ode(spec, hd.strategy(spec, 1.0), hd_mass(0.0), 0.0)


def test_simplex_exit_error():
    # outcome weights far outside [0, 1] give a stiff flow; RK4 at h = 0.1 overshoots
    space = StateSpace.build(1, (1, 2), ("a",))
    stiff = TransitionKernel(lambda k, t, s, a, m: {(2,): 300.0, (1,): -299.0} if s[0] == 1 else {(2,): 1.0})
    spec = ModelSpec(space, InteractionLaw.fixed(1), stiff, GainFunction(lambda *a: 0.0, 0.0), 1.0)
    with pytest.raises(mf.SimplexExitError, match="drift inconsistent with mass conservation"):
        mf.integrate_ode(spec, StationaryStrategy.uniform(space), np.array([1.0, 0.0]), 1.0, h=0.1,
                         error_estimate=False)


@settings(max_examples=60)
@given(U, U, U, st.floats(0.1, 3), st.floats(0.1, 3))
def test_generator_rows_and_signs(u1, u2, q, v_bar, c):
    spec = hd.build_model(v_bar=v_bar, c=c)
    g = mf.jump_generator(spec, hd.strategy(spec, u1), hd.strategy(spec, u2), hd_mass(q))
    A = g.matrix
    assert np.allclose(A.sum(axis=1), 0.0, atol=1e-14)
    assert np.all(A - np.diag(np.diag(A)) >= 0)


def test_generator_single_player_kernel():
    spec = two_state_model(0.3, 0.6)
    u = StationaryStrategy.uniform(spec.space)
    g = mf.jump_generator(spec, u, u, np.array([0.5, 0.5]))
    assert g.rate(1, 2) == pytest.approx(0.3)
    assert g.rate(2, 1) == pytest.approx(0.6)


def test_generator_idle_action():
    space = StateSpace.build(1, (1, 2), ("stay", "go"))
    law = TransitionKernel(lambda k, t, s, a, m: {((3 - s[0]) if a[0] == "go" else s[0],): 1.0})
    spec = ModelSpec(space, InteractionLaw.fixed(1), law, GainFunction(lambda *a: 0.0, 0.0), 1.0)
    stay = StationaryStrategy.from_mapping(space, {1: "stay", 2: "stay"})
    go = StationaryStrategy.from_mapping(space, {1: "go", 2: "go"})
    g = mf.jump_generator(spec, stay, go, np.array([0.5, 0.5]))
    assert np.all(g.matrix == 0.0)


def test_generator_pair_enumeration():
    # tagged Hawk at level 2 loses only to a level-2 Hawk (prob 1/2) and then
    # drops with prob 1/2; it takes part in 2 events per unit time
    spec = hd.build_model()
    for u2, q in [(1.0, 2 / 3), (0.4, 0.3), (0.0, 0.9)]:
        g = mf.jump_generator(spec, hd.strategy(spec, 1.0), hd.strategy(spec, u2), hd_mass(q))
        assert g.rate(2, 1) == pytest.approx(2 * q * u2 * 0.25, abs=1e-15)


def test_generator_against_tagged_microsim():
    spec = hd.build_model()
    u = hd.strategy(spec, 1.0)
    N, reps, T = 300, 100, 20.0
    counts = np.array([100, 199])
    res = ms.run_batch(spec, u, counts, N, int(N * T), [(5, r) for r in range(reps)], u, 1, stride=1)
    path = res.tagged_path
    at2 = path[:-1] == 1
    jumps = (at2 & (path[1:] == 0)).sum()
    time_in_2 = at2.sum() / N
    rate = jumps / time_in_2
    expected = mf.jump_generator(spec, u, u, np.array([1 / 3, 2 / 3])).rate(2, 1)
    assert abs(rate - expected) < 3 * math.sqrt(jumps) / time_in_2


def test_value_constant_reward():
    spec = constant_model(k=1, c0=0.7, beta=2.0)
    u = StationaryStrategy.uniform(spec.space)
    vt = mf.tagged_value(spec, u, u, "s", np.array([1.0]), tolerance=1e-8)
    assert vt.values["s"] == pytest.approx(0.35, abs=1e-8)


def drain_model():
    """Level 1 always climbs; a level-2 player earns 1 per level-1 partner."""
    space = StateSpace.build(1, (1, 2), ("a",))
    law = TransitionKernel(lambda k, t, s, a, m: {(2, 2): 1.0})
    gain = GainFunction(lambda x, a, xn, ox, oa, on: 1.0 if x[1] == 2 and ox[0][1] == 1 else 0.0, 1.0)
    return ModelSpec(space, InteractionLaw.fixed(2), law, gain, 1.0)


def test_value_time_varying_reward_quadrature():
    from scipy.integrate import quad

    spec = drain_model()
    u = StationaryStrategy.uniform(spec.space)
    m10 = 0.8
    vt = mf.tagged_value(spec, u, u, 2, np.array([m10, 1 - m10]), tolerance=1e-8)
    # m1(t) = m10 e^{-2t}, r(2, t) = 2 m1(t)
    ref, _ = quad(lambda t: math.exp(-t) * 2 * m10 * math.exp(-2 * t), 0, 60)
    assert vt.values[2] == pytest.approx(ref, abs=1e-7)


def test_value_shift():
    base = hd.build_model(v_bar=1.0, c=0.6)
    d = 0.3
    g = GainFunction(lambda *a: base.gain(*a) + d, base.gain.bound + d)
    shifted = ModelSpec(base.space, base.interaction, base.kernel, g, base.discount)
    u = hd.hawk_at_top(base)
    m0 = hd_mass(0.5)
    v0 = mf.tagged_value(base, u, u, 2, m0, 1e-8).values
    v1 = mf.tagged_value(shifted, u, u, 2, m0, 1e-8).values
    # two events per unit time each pay the shift
    for s in (1, 2):
        assert v1[s] - v0[s] == pytest.approx(2 * d / base.discount, abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(U, U, U, st.floats(0.1, 3), st.floats(0.1, 3), st.floats(0.3, 3))
def test_value_bound(u1, u2, q, v_bar, c, beta):
    spec = hd.build_model(v_bar=v_bar, c=c, beta=beta)
    tol = 1e-6
    vt = mf.tagged_value(spec, hd.strategy(spec, u1), hd.strategy(spec, u2), 2, hd_mass(q), tol)
    assert max(abs(v) for v in vt.values.values()) <= vt.meta["sup_r"] / beta + tol


def test_value_rejects_bad_tolerance():
    spec = hd.build_model()
    u = hd.hawk_at_top(spec)
    with pytest.raises(ModelError):
        mf.tagged_value(spec, u, u, 2, hd_mass(0.5), tolerance=0.0)


@pytest.mark.parametrize("q", [0.0, 0.5, 1.0])
def test_attractor_all_hawk(q):
    spec = hd.build_model()
    res = mf.attractor(spec, hd.strategy(spec, 1.0), hd_mass(q))
    assert res.profile[1] == pytest.approx(2 / 3, abs=1e-10)
    assert res.converged


def test_attractor_all_dove():
    spec = hd.build_model()
    res = mf.attractor(spec, hd.strategy(spec, 0.0), hd_mass(0.0))
    assert res.profile[1] == pytest.approx(2 - math.sqrt(2), abs=1e-10)


def test_attractor_limit_cycle():
    spec = rotation_model()
    with pytest.raises(mf.AttractorError, match="no attractor detected from m0"):
        mf.attractor(spec, StationaryStrategy.uniform(spec.space), np.array([0.6, 0.3, 0.1]),
                     horizon_cap=100)


def test_stationary_single_state():
    assert np.array_equal(mf.stationary_distribution(np.zeros((1, 1))), [1.0])


@given(st.floats(0.01, 1), st.floats(0.01, 1))
def test_stationary_two_state(lam, mu):
    A = np.array([[-lam, lam], [mu, -mu]])
    assert mf.stationary_distribution(A) == pytest.approx(np.array([mu, lam]) / (lam + mu), abs=1e-12)


def test_stationary_reducible():
    with pytest.raises(mf.ReducibleGeneratorError, match="reducible generator"):
        mf.stationary_distribution(np.zeros((2, 2)), [1, 2])


def test_stationary_payoff_two_state_model():
    spec = two_state_model(0.3, 0.6, r1=1.0, r2=0.0)
    u = StationaryStrategy.uniform(spec.space)
    sp = mf.stationary_payoff(spec, u, u)
    assert sp.pi[1] == pytest.approx(2 / 3, abs=1e-12)
    # (beta I - A) V = r with A = [[-.3, .3], [.6, -.6]]
    assert sp.values[1] == pytest.approx(1 / 1.1875, abs=1e-12)
    assert sp.value == pytest.approx(2 / 3 * (1 / 1.1875) + 1 / 3 * (0.375 / 1.1875), abs=1e-12)


def test_stationary_payoff_hawk_dove_balance():
    spec = hd.build_model(v_bar=1.0, c=1.0)
    u = hd.strategy(spec, 1.0)
    sp = mf.stationary_payoff(spec, u, u)
    g = mf.jump_generator(spec, u, u, sp.m_star)
    assert sp.pi[1] * g.rate(1, 2) == pytest.approx(sp.pi[2] * g.rate(2, 1), abs=1e-12)
    # the tagged occupancy reproduces the attractor itself
    assert sp.pi[2] == pytest.approx(2 / 3, abs=1e-9)
    assert sp.value == pytest.approx(1 / 9, abs=1e-9)


def test_tagged_value_matches_stationary_solution():
    spec = hd.build_model(v_bar=1.0, c=1.0)
    u = hd.strategy(spec, 1.0)
    vt = mf.tagged_value(spec, u, u, 2, hd_mass(2 / 3), tolerance=1e-8)
    assert vt.values[1] == pytest.approx(2 / 9, abs=1e-6)
    assert vt.values[2] == pytest.approx(1 / 18, abs=1e-6)
