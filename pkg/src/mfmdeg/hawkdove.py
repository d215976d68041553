"""Hawk-Dove contests between animals carrying an energy level.

Two variants are built.  The 2-level game has levels {1, 2}; an animal at
level 1 can only play Dove.  The 3-level game has levels {0, 1, 2}; level 0
has no action and regenerates spontaneously at rates ``mu1`` (to 1) and
``mu2`` (to 2).

For the 2-level game two sets of dynamics are available:

* ``"quadratic"`` (default) reproduces the quadratic field
  ``dm2/dt = 1 + (u2/2 - 2) m2 + (1 - u2)/2 m2^2`` exactly.  The winner/loser
  rule of the fitness table is kept, except that a loser at level 2 facing a
  level-2 opponent only drops with probability 1/2, and a level-1 Dove beaten by
  a level-2 Hawk climbs with probability 1/4.
* ``"table"`` applies the winner/loser rule literally (field ``1 - 2 m2``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

from .model import (
    GainFunction,
    InteractionLaw,
    ModelError,
    ModelSpec,
    SpontaneousLaw,
    StateSpace,
    StationaryStrategy,
    TransitionKernel,
)

HAWK, DOVE = "H", "D"
BOUNDARY_BAND = 1e-5


@dataclass(frozen=True)
class HawkDoveParams:
    v_bar: float = 1.0
    c: float = 1.0
    beta: float = 1.0
    mu1: float = 0.0
    mu2: float = 0.0
    levels: int = 2
    dynamics: str = "quadratic"

    def __post_init__(self):
        if not self.v_bar > 0:
            raise ModelError("v_bar must be positive")
        if not self.c > 0:
            raise ModelError("c must be positive")
        if not self.beta > 0:
            raise ModelError("beta must be positive")
        if self.mu1 < 0 or self.mu2 < 0:
            raise ModelError("regeneration rates must be nonnegative")
        if self.levels not in (2, 3):
            raise ModelError(f"levels must be 2 or 3, got {self.levels}")
        if self.dynamics not in ("quadratic", "table"):
            raise ModelError(f"unknown dynamics {self.dynamics!r}")
        if self.levels == 3 and self.dynamics != "table":
            object.__setattr__(self, "dynamics", "table")

    @property
    def gain_bound(self) -> float:
        return max(self.v_bar, abs(self.v_bar / 2 - self.c))


def _pair_gain(p: HawkDoveParams, a, b) -> float:
    if a is None:
        return 0.0
    if b is None:
        return p.v_bar
    if a == b == DOVE:
        return p.v_bar / 2
    if a == b == HAWK:
        return p.v_bar / 2 - p.c
    return p.v_bar if a == HAWK else 0.0


def _contest(x1, a1, x2, a2):
    """List of ``(winner, loser, prob)`` with positions 0/1."""
    if a1 == a2:
        return [(0, 1, 0.5), (1, 0, 0.5)]
    return [(0, 1, 1.0)] if a1 == HAWK else [(1, 0, 1.0)]


def _kernel_2(quadratic: bool):
    def joint_law(k, types, states, actions, m):
        if k != 2:
            raise ModelError("Hawk-Dove events involve exactly two animals")
        x = list(states)
        out: dict[tuple, float] = {}
        for w, l, p in _contest(x[0], actions[0], x[1], actions[1]):
            nxt = [0, 0]
            nxt[w] = 2
            drop = 1.0
            rise = 0.0
            if quadratic:
                if x[0] == x[1] == 2:
                    drop = 0.5
                elif x[l] == 1 and x[w] == 2 and actions[w] == HAWK:
                    rise = 0.25
            if x[l] == 2:
                outcomes = [(1, drop), (2, 1.0 - drop)]
            else:
                outcomes = [(2, rise), (1, 1.0 - rise)]
            for s_l, q in outcomes:
                if q <= 0:
                    continue
                nxt[l] = s_l
                key = tuple(nxt)
                out[key] = out.get(key, 0.0) + p * q
        return out

    return joint_law


def _kernel_3(k, types, states, actions, m):
    if k != 2:
        raise ModelError("Hawk-Dove events involve exactly two animals")
    x1, x2 = states
    if x1 == 0 and x2 == 0:
        return {(0, 0): 1.0}
    if x1 == 0:
        return {(0, min(x2 + 1, 2)): 1.0}
    if x2 == 0:
        return {(min(x1 + 1, 2), 0): 1.0}
    out: dict[tuple, float] = {}
    for w, l, p in _contest(x1, actions[0], x2, actions[1]):
        nxt = [0, 0]
        nxt[w] = min(states[w] + 1, 2)
        nxt[l] = max(states[l] - 1, 0)
        key = tuple(nxt)
        out[key] = out.get(key, 0.0) + p
    return out


def build_model(params: HawkDoveParams | None = None, **kw) -> ModelSpec:
    p = params if params is not None else HawkDoveParams(**kw)
    if p.levels == 2:
        space = StateSpace.build(1, (1, 2), {1: (DOVE,), 2: (HAWK, DOVE)})
        kernel = TransitionKernel(_kernel_2(p.dynamics == "quadratic"))
        spont = None
    else:
        space = StateSpace.build(1, (0, 1, 2), {0: (), 1: (HAWK, DOVE), 2: (HAWK, DOVE)})
        kernel = TransitionKernel(_kernel_3)
        rates = {1: p.mu1, 2: p.mu2}
        spont = SpontaneousLaw(lambda theta, s: rates if s == 0 else {})

    def gain(x, a, xn, ox, oa, on):
        return _pair_gain(p, a, oa[0])

    return ModelSpec(space, InteractionLaw.fixed(2), kernel, GainFunction(gain, p.gain_bound),
                     p.beta, spont, name=f"hawk-dove-{p.levels}",
                     meta={"params": p})


def strategy(spec: ModelSpec, v2: float, v1: float = 0.0) -> StationaryStrategy:
    """Hawk probability ``v2`` at level 2 and ``v1`` at level 1 (3-level only)."""
    policy: dict[Any, tuple] = {2: (v2, 1 - v2)}
    if 0 in spec.space.internal_states:
        policy[1] = (v1, 1 - v1)
    return StationaryStrategy.from_mapping(spec.space, policy)


def hawk_at_top(spec: ModelSpec) -> StationaryStrategy:
    """Dove at level 1, Hawk at level 2."""
    return strategy(spec, 1.0, 0.0)


# ---------------------------------------------------------------- closed forms

@dataclass(frozen=True)
class ClosedFormConstants:
    case: str
    u2: float
    m0: float
    c1: float
    gamma_minus: float
    gamma_plus: float
    w0: float
    lam: float
    a1: float
    a2: float
    a3: float


def _check_u2(u2: float) -> None:
    if not 0.0 <= u2 <= 1.0:
        raise ModelError(f"u2 must lie in [0, 1], got {u2!r}")


def quadratic_coefficients(u2: float) -> tuple[float, float, float]:
    return 1.0, u2 / 2 - 2.0, (1.0 - u2) / 2


def gamma_minus(u2: float) -> float:
    """Stable root of the quadratic field, written to stay finite at ``u2 = 1``."""
    _check_u2(u2)
    return 2.0 / (2.0 - u2 / 2 + math.sqrt(2.0 + u2 * u2 / 4))


def gamma_plus(u2: float) -> float:
    _check_u2(u2)
    if u2 == 1.0:
        return math.inf
    return (2.0 - u2 / 2 + math.sqrt(2.0 + u2 * u2 / 4)) / (1.0 - u2)


def closed_form_constants(u2: float, m0: float) -> ClosedFormConstants:
    _check_u2(u2)
    a1, a2, a3 = quadratic_coefficients(u2)
    gm, gp = gamma_minus(u2), gamma_plus(u2)
    lam = math.sqrt(2.0 + u2 * u2 / 4)
    if u2 == 1.0:
        w0 = 0.0
    elif m0 == gm:
        w0 = math.inf
    else:
        w0 = (m0 - gp) / (m0 - gm)
    return ClosedFormConstants("u2=1" if u2 == 1.0 else "u2<1", u2, m0,
                               1.0 - 1.5 * m0, gm, gp, w0, lam, a1, a2, a3)


def closed_form_m2(u2: float, m0: float, t):
    """Mass at level 2 at time ``t`` (scalar or array) from ``m2(0) = m0``.

    Solves ``d/dt (m2 - g) = a3 (m2 - g)^2 - lam (m2 - g)`` with ``g`` the stable
    root; this is the logistic form with ``w0 = (m0 - g+)/(m0 - g-)`` written so
    that it never divides by a vanishing ``1 - u2``.
    """
    _check_u2(u2)
    if not 0.0 <= m0 <= 1.0:
        raise ModelError(f"m0 must lie in [0, 1], got {m0!r}")
    import numpy as np

    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise ModelError("t must be nonnegative")
    if u2 == 1.0:
        out = (2.0 / 3.0) * (1.0 - (1.0 - 1.5 * m0) * np.exp(-1.5 * t_arr))
    else:
        _, _, a3 = quadratic_coefficients(u2)
        gm = gamma_minus(u2)
        lam = math.sqrt(2.0 + u2 * u2 / 4)
        d0 = m0 - gm
        e = np.exp(-lam * t_arr)
        out = gm + d0 * e / (1.0 - (a3 * d0 / lam) * (1.0 - e))
    return float(out) if out.ndim == 0 else out


def logistic_m2_uncorrected(u2: float, m0: float, t):
    """Logistic expression with the uncorrected integration constant and rate.

    Kept only as a regression witness: at ``t = 0`` it returns ``2 g- - m0``.
    """
    import numpy as np

    if u2 == 1.0:
        raise ModelError("uncorrected logistic form is defined for u2 < 1")
    _, a2, _ = quadratic_coefficients(u2)
    gm, gp = gamma_minus(u2), gamma_plus(u2)
    c2 = 1.0 + (gp - gm) / (m0 - gm)
    t_arr = np.asarray(t, dtype=float)
    out = gm + (gp - gm) / (1.0 - c2 * np.exp((gp - gm) * a2 * t_arr))
    return float(out) if out.ndim == 0 else out


def attractor_m2(u2: float) -> float:
    return gamma_minus(u2)


def field_m2(u2: float, m2: float) -> float:
    a1, a2, a3 = quadratic_coefficients(u2)
    return a1 + a2 * m2 + a3 * m2 * m2


# ---------------------------------------------------- payoffs and best response

def instant_payoffs(v: float, u2: float, m2: float, v_bar: float = 1.0, c: float = 1.0) -> tuple[float, float]:
    """Expected instant payoffs ``(r at level 1, r at level 2)`` for Hawk probability ``v`` at level 2."""
    for name, val in (("v", v), ("u2", u2), ("m2", m2)):
        if not 0.0 <= val <= 1.0:
            raise ModelError(f"{name} must lie in [0, 1], got {val!r}")
    r1 = 0.5 * (1.0 - m2 * u2) * v_bar
    r2 = v * (v_bar - c * m2 * u2) + (1.0 - v) * r1
    return r1, r2


def beta2(u2: float, m2: float, v_bar: float, c: float) -> float:
    g = m2 * u2
    return 0.5 * v_bar * (1.0 + g) - c * g


def _verdict(b: float) -> str:
    if b > 0:
        return "hawk"
    if b < 0:
        return "dove"
    return "indifferent"


@dataclass
class Beta2Result:
    beta2: float
    action: str
    m2: float
    crossing_time: float | None
    sign_at_start: str
    sign_at_infinity: str


def beta2_and_best_response(params: HawkDoveParams, u2: float, m0: float, t: float,
                            t_max: float = 100.0, tol: float = 1e-12) -> Beta2Result:
    """Sign of the Hawk advantage at level 2 at time ``t`` along the closed-form path.

    The unique zero crossing in ``[0, t_max]`` (if any) is located by bisection;
    uniqueness follows from monotonicity of ``m2`` in time.
    """
    m2 = closed_form_m2(u2, m0, t)
    b = beta2(u2, m2, params.v_bar, params.c)

    def g(s: float) -> float:
        return beta2(u2, closed_form_m2(u2, m0, s), params.v_bar, params.c)

    lo, hi = 0.0, t_max
    g_lo, g_hi = g(lo), g(hi)
    crossing = None
    if g_lo == 0.0:
        crossing = 0.0
    elif g_lo * g_hi < 0:
        while hi - lo > tol * max(1.0, hi):
            mid = 0.5 * (lo + hi)
            g_mid = g(mid)
            if g_mid == 0.0:
                lo = hi = mid
                break
            if (g_mid > 0) == (g_lo > 0):
                lo, g_lo = mid, g_mid
            else:
                hi = mid
        crossing = 0.5 * (lo + hi)
    lim = beta2(u2, gamma_minus(u2), params.v_bar, params.c)
    return Beta2Result(b, _verdict(b), m2, crossing, _verdict(g(0.0)), _verdict(lim))


@dataclass
class ThresholdReport:
    ratio: float
    threshold_holds: bool
    boundary_sensitive: bool
    message: str
    certificate: Any = None
    agrees: bool | None = None


def equilibrium_threshold_check(params: HawkDoveParams, delta: float = 0.05, s0: int = 2,
                                tolerance: float = 1e-6, eps_tol: float = 1e-3) -> ThresholdReport:
    """Compare the closed threshold ``v_bar/(2c) > 2/3`` with a grid certificate.

    The certificate is computed for (Dove at 1, Hawk at 2) started at its own
    attractor.
    """
    from . import meanfield, solver

    ratio = params.v_bar / (2 * params.c)
    holds = ratio > 2.0 / 3.0
    sensitive = abs(ratio - 2.0 / 3.0) < BOUNDARY_BAND
    spec = build_model(HawkDoveParams(params.v_bar, params.c, params.beta, levels=2,
                                      dynamics=params.dynamics))
    u = hawk_at_top(spec)
    m_star = meanfield.attractor(spec, u, spec.uniform_profile()).profile
    grid = solver.StrategyGrid(spec.space, delta)
    cert = solver.certify(spec, u, s0, m_star, grid, kind="equilibrium", tolerance=tolerance)
    is_eq = cert.epsilon < eps_tol
    if holds:
        msg = "threshold holds"
    else:
        msg = "not guaranteed by threshold"
    if sensitive:
        msg += "; ratio within %.0e of 2/3, numerically sensitive" % BOUNDARY_BAND
    return ThresholdReport(ratio, holds, sensitive, msg, cert,
                           agrees=(is_eq == holds) if not sensitive else None)


# ------------------------------------------- 3-level rate expressions

def rate_expressions_3(v1: float, v2: float, m) -> dict[str, float]:
    """Level-change rates ``L12``, ``L21``, ``L10`` as closed-form expressions."""
    m0, m1, m2 = m
    l12 = (m0 + v1 * (v1 * m1 / 2 + (1 - v1) * m1 + v2 * m2 / 2 + (1 - v2) * m2)
           + (1 - v1) * ((1 - v1) * m1 / 2 + (1 - v2) * m2 / 2))
    l21 = (v2 * (v1 * m1 / 2 + v2 * m2 / 2)
           + (1 - v2) * ((1 - v1) * m1 / 2 + v2 * m2 + (1 - v2) * m2 / 2))
    l10 = (v1 * (v1 * m1 / 2 + v2 * m2 / 2)
           + (1 - v1) * (v1 * m1 + (1 - v1) * m1 / 2 + v2 * m2 + (1 - v2) * m2 / 2))
    return {"L12": l12, "L21": l21, "L10": l10}


def rate_expressions_field_3(v1: float, v2: float, m, mu1: float, mu2: float) -> tuple[float, float, float]:
    """``(dm0, dm1, dm2)`` from the closed-form 3-level rates."""
    m0, m1, m2 = m
    L = rate_expressions_3(v1, v2, m)
    d2 = m0 * mu2 + m1 * L["L12"] - m2 * L["L21"]
    d1 = m0 * mu1 + m2 * L["L21"] - m1 * L["L12"] - m1 * L["L10"]
    d0 = m1 * L["L10"] - (mu1 + mu2) * m0
    return d0, d1, d2
