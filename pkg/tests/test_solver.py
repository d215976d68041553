from __future__ import annotations

import numpy as np
import pytest

from conftest import constant_model
from oracles import exact_finite_value
from mfmdeg import hawkdove as hd
from mfmdeg import meanfield as mf
from mfmdeg import microsim as ms
from mfmdeg import solver as so
from mfmdeg.model import ModelError, StateSpace, StationaryStrategy


@pytest.fixture(scope="module")
def hd15():
    spec = hd.build_model(v_bar=1.5, c=1.0)
    u = hd.hawk_at_top(spec)
    m_star = mf.attractor(spec, u, np.array([0.5, 0.5])).profile
    return spec, u, m_star


def hawk_prob(u, s=2):
    return u.prob(1, s, "H")


def test_grid_size_and_order():
    sp = hd.build_model().space
    g = so.StrategyGrid(sp, 0.05)
    pts = g.points()
    assert g.size == len(pts) == 21
    # Hawk probability at level 2 increases along the enumeration
    assert [hawk_prob(u) for u in pts] == sorted(hawk_prob(u) for u in pts)
    assert len(g.pure_points()) == 2


def test_grid_three_level_size():
    sp = hd.build_model(hd.HawkDoveParams(levels=3)).space
    assert so.StrategyGrid(sp, 0.25).size == 25


def test_grid_errors():
    sp = hd.build_model().space
    with pytest.raises(ModelError, match="1/delta must be an integer"):
        so.StrategyGrid(sp, 0.3)
    sp3 = StateSpace.build(1, (1, 2, 3), ("a", "b", "c"))
    with pytest.raises(ModelError, match="coarser delta"):
        so.StrategyGrid(sp3, 0.01, cap=1000)


def test_grid_nearest():
    sp = hd.build_model().space
    g = so.StrategyGrid(sp, 0.05)
    u = hd.strategy(hd.build_model(), 0.512)
    assert hawk_prob(g.nearest(u)) == pytest.approx(0.5)


def test_single_action_best_response():
    spec = constant_model(k=2)
    g = so.StrategyGrid(spec.space, 0.05)
    u = StationaryStrategy.uniform(spec.space)
    br = so.best_response(spec, u, "s", np.array([1.0]), g)
    assert br.strategy == u and g.size == 1


def test_constant_game_fixed_point():
    spec = constant_model(k=2)
    u = StationaryStrategy.uniform(spec.space)
    cert = so.fixed_point_iterate(spec, u, "s", np.array([1.0]), so.StrategyGrid(spec.space, 0.05))
    assert cert.strategy == u and cert.epsilon == 0.0 and cert.converged


def test_best_response_equilibrium(hd15):
    spec, u, m_star = hd15
    br = so.best_response(spec, u, 2, m_star, so.StrategyGrid(spec.space, 0.05))
    assert br.strategy.distance(u) == 0.0


def test_best_response_low_value_plays_dove():
    spec = hd.build_model(v_bar=0.5, c=1.0)
    u = hd.strategy(spec, 1.0)
    m_star = mf.attractor(spec, u, np.array([0.5, 0.5])).profile
    br = so.best_response(spec, u, 2, m_star, so.StrategyGrid(spec.space, 0.05))
    assert hawk_prob(br.strategy) == 0.0
    assert hd.beta2(1.0, m_star[1], 0.5, 1.0) == pytest.approx(-0.25, abs=1e-9)


def test_best_response_exhaustive(hd15):
    spec, u, m_star = hd15
    g = so.StrategyGrid(spec.space, 0.05)
    br = so.best_response(spec, u, 2, m_star, g)
    for v in g.points():
        val = mf.tagged_value(spec, v, u, 2, m_star).values[2]
        assert br.value >= val - 1e-9


def test_tagged_linear_matches_exhaustive():
    rng = np.random.default_rng(2024)
    g = so.StrategyGrid(hd.build_model().space, 0.05)
    for _ in range(20):
        v_bar, c = rng.uniform(0.2, 3.0, 2)
        spec = hd.build_model(v_bar=float(v_bar), c=float(c))
        field = hd.strategy(spec, float(rng.uniform()))
        m_star = mf.attractor(spec, field, np.array([0.5, 0.5])).profile
        a = so.best_response(spec, field, 2, m_star, g)
        b = so.best_response(spec, field, 2, m_star, g, tagged_linear=True)
        assert b.value == pytest.approx(a.value, abs=1e-9)


def test_fixed_point_from_all_hawk(hd15):
    spec, u, _ = hd15
    g = so.StrategyGrid(spec.space, 0.05)
    cert = so.fixed_point_iterate(spec, hd.strategy(spec, 1.0), 2, np.array([0.5, 0.5]), g)
    assert cert.strategy.distance(u) == 0.0
    assert -1e-9 <= cert.epsilon < 1e-3
    assert cert.converged and not cert.extra["cycling"]


def test_unique_grid_equilibrium(hd15):
    spec, u, _ = hd15
    g = so.StrategyGrid(spec.space, 0.05)
    m0 = np.array([0.5, 0.5])
    eq = [v for v in g.points() if so.certify(spec, v, 2, m0, g).epsilon <= 1e-9]
    assert len(eq) == 1 and eq[0].distance(u) == 0.0


def test_certificate_json(hd15):
    spec, u, m_star = hd15
    cert = so.certify(spec, u, 2, m_star, so.StrategyGrid(spec.space, 0.25))
    js = cert.to_json()
    for key in ("strategy", "value", "epsilon", "kind", "grid_delta", "s0", "m0", "converged"):
        assert key in js
    assert js["epsilon"] >= -1e-9


def test_team_more_dovish_than_equilibrium():
    spec = hd.build_model(v_bar=1.0, c=2.0)
    g = so.StrategyGrid(spec.space, 0.05)
    m0 = np.array([0.5, 0.5])
    eq = so.fixed_point_iterate(spec, hd.strategy(spec, 1.0), 2, m0, g)
    team = so.optimize_team(spec, 2, m0, g)
    assert hawk_prob(team.strategy) <= hawk_prob(eq.strategy)
    assert team.kind == "team-optimal" and team.epsilon == 0.0
    # the selfish outcome leaves value on the table
    assert team.value > eq.value


def test_team_value_refinement():
    spec = hd.build_model(v_bar=1.0, c=0.6)
    m0 = np.array([0.5, 0.5])
    coarse = so.optimize_team(spec, 2, m0, so.StrategyGrid(spec.space, 0.25))
    fine = so.optimize_team(spec, 2, m0, so.StrategyGrid(spec.space, 0.05))
    assert fine.value >= coarse.value - 1e-12


def test_stationary_certificate(hd15):
    spec, u, _ = hd15
    cert = so.stationary_certificate(spec, u, so.StrategyGrid(spec.space, 0.25))
    assert cert.epsilon == pytest.approx(0.0, abs=1e-9)


def test_finite_gap_degenerate():
    spec = constant_model(k=2, c0=1.0)
    u = StationaryStrategy.uniform(spec.space)
    rows = so.finite_N_gap(spec, u, "s", np.array([1.0]), [5, 10], 4, probes=[u])
    assert all(r.epsilon == 0.0 for r in rows)


def test_finite_gap_not_significant(hd15):
    spec, u, m_star = hd15
    rows = so.finite_N_gap(spec, u, 2, m_star, [100, 500], 200, seed=3)
    for r in rows:
        assert not r.significant


@pytest.mark.parametrize("m2", [0.0, 1.0])
def test_finite_value_approaches_limit(m2):
    spec = hd.build_model(v_bar=1.5, c=1.0)
    u = hd.hawk_at_top(spec)
    lim = mf.tagged_value(spec, u, u, 2, np.array([1 - m2, m2]), 1e-9).values[2]
    errs = [abs(exact_finite_value(spec, u, u, N, 2, round(m2 * (N - 1))) - lim) for N in (50, 200, 1000)]
    assert errs[0] > errs[1] > errs[2]


def test_microsim_matches_exact_finite_value():
    spec = hd.build_model(v_bar=1.0, c=0.6)
    u = hd.hawk_at_top(spec)
    N = 40
    exact = exact_finite_value(spec, u, u, N, 2, 13)
    rep = ms.check_payoff_equivalence(spec, u, u, 2, np.array([26, 13]) / 39, N, 1500, seed=8)
    for est in (rep.gain_based, rep.expected_based):
        assert abs(est.mean - exact) < 3 * est.std_error + 1e-6
