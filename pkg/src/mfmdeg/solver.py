"""Best responses, equilibria and team optima of the limit game on a strategy grid.

All epsilons are grid epsilons: the gain of the best grid deviation, not of the
best deviation over the whole strategy simplex.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import meanfield as mf
from . import microsim as ms
from .model import (
    ModelError,
    ModelSpec,
    PopulationProfile,
    StateSpace,
    StationaryStrategy,
    nearest_grid_counts,
)

GRID_CAP = 100_000
TIE_TOL = 1e-9
Z99 = 2.5758293035489004


def _compositions(n: int, parts: int) -> list[tuple[int, ...]]:
    if parts == 1:
        return [(n,)]
    out = []
    for first in range(n + 1):
        for rest in _compositions(n - first, parts - 1):
            out.append((first,) + rest)
    return out


@dataclass(frozen=True)
class StrategyGrid:
    """Product over states of the ``delta``-grid on each action simplex.

    Within a state the probability of the first listed action increases along
    the enumeration, so ties resolve toward the other actions (Dove first for
    Hawk-Dove).  Earlier states vary slowest.
    """

    space: StateSpace
    delta: float = 0.05
    cap: int = GRID_CAP

    def __post_init__(self):
        if not 0 < self.delta <= 1:
            raise ModelError("grid resolution must lie in (0, 1]")
        n = round(1.0 / self.delta)
        if abs(n * self.delta - 1.0) > 1e-9:
            raise ModelError(f"1/delta must be an integer, got delta={self.delta}")
        if self.size > self.cap:
            raise ModelError(f"strategy grid has {self.size} points (cap {self.cap}); use a coarser delta")

    @property
    def resolution(self) -> int:
        return round(1.0 / self.delta)

    def _rows(self) -> list[list[tuple[float, ...]]]:
        n = self.resolution
        rows = []
        for acts in self.space.actions:
            if len(acts) <= 1:
                rows.append([tuple(1.0 for _ in acts)])
            else:
                rows.append([tuple(c / n for c in comp) for comp in _compositions(n, len(acts))])
        return rows

    @property
    def size(self) -> int:
        n = round(1.0 / self.delta)
        return math.prod(math.comb(n + len(a) - 1, len(a) - 1) if len(a) > 1 else 1
                         for a in self.space.actions)

    def points(self) -> list[StationaryStrategy]:
        return [StationaryStrategy(self.space, combo) for combo in itertools.product(*self._rows())]

    def pure_points(self) -> list[StationaryStrategy]:
        return [u for u in self.points() if all(p in (0.0, 1.0) for row in u.probs for p in row)]

    def nearest(self, u: StationaryStrategy) -> StationaryStrategy:
        n = self.resolution
        rows = []
        for acts, row in zip(self.space.actions, u.probs):
            rows.append(tuple(c / n for c in nearest_grid_counts(row, n)) if row else ())
        return StationaryStrategy(self.space, tuple(rows))


@dataclass
class Certificate:
    strategy: StationaryStrategy
    value: float
    epsilon: float
    kind: str
    grid_delta: float
    s0: object
    m0: list
    converged: bool = True
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {"strategy": self.strategy.to_json(), "value": self.value, "epsilon": self.epsilon,
               "kind": self.kind, "grid_delta": self.grid_delta, "s0": self.s0,
               "m0": [float(v) for v in self.m0], "converged": self.converged}
        out.update(self.extra)
        return out


@dataclass
class BestResponse:
    strategy: StationaryStrategy
    value: float
    index: int
    values: np.ndarray
    candidates: list


def _mass(spec: ModelSpec, m0) -> np.ndarray:
    if isinstance(m0, PopulationProfile):
        return np.array(m0.mass)
    return np.asarray(m0, dtype=float)


def _first_max(vals: np.ndarray) -> int:
    top = float(np.max(vals))
    return int(np.nonzero(vals >= top - TIE_TOL * max(1.0, abs(top)))[0][0])


def best_response(spec: ModelSpec, u_field: StationaryStrategy, s0, m0, grid: StrategyGrid,
                  tolerance: float = 1e-6, tagged_linear: bool = False,
                  path: mf.FieldPath | None = None) -> BestResponse:
    """Maximize ``R(v, u_field; s0, m0)`` over the grid.

    With ``tagged_linear`` only pure grid points are evaluated; rates and rewards
    are linear in the tagged player's own action probabilities, so a pure
    maximizer exists whenever the field is at rest.
    """
    if path is None:
        path = mf.field_path(spec, u_field, _mass(spec, m0), tolerance)
    cands = grid.pure_points() if tagged_linear else grid.points()
    s_idx = spec.space.internal_states.index(s0)
    V = mf.solve_values(path, cands, spec.discount)[:, s_idx]
    i = _first_max(V)
    return BestResponse(cands[i], float(V[i]), i, V, cands)


def certify(spec: ModelSpec, u: StationaryStrategy, s0, m0, grid: StrategyGrid,
            kind: str = "equilibrium", tolerance: float = 1e-6, converged: bool = True) -> Certificate:
    """Grid epsilon of ``u`` (equilibrium: best deviation against ``u``; team: best symmetric value)."""
    mass = _mass(spec, m0)
    s_idx = spec.space.internal_states.index(s0)
    if kind == "equilibrium":
        path = mf.field_path(spec, u, mass, tolerance)
        own = float(mf.solve_values(path, [u], spec.discount)[0, s_idx])
        br = best_response(spec, u, s0, mass, grid, tolerance, path=path)
        eps = br.value - own
        ties = [c.to_json() for c, v in zip(br.candidates, br.values) if v >= br.value - TIE_TOL]
        return Certificate(u, own, float(eps), kind, grid.delta, s0, list(mass), converged,
                           {"best_deviation": br.strategy.to_json(), "tie_class": ties})
    if kind == "team-optimal":
        vals = team_values(spec, grid.points(), s0, mass, tolerance)
        own = team_values(spec, [u], s0, mass, tolerance)[0]
        return Certificate(u, float(own), float(max(vals.max() - own, 0.0)), kind, grid.delta,
                           s0, list(mass), converged)
    raise ModelError(f"unknown certificate kind {kind!r}")


def fixed_point_iterate(spec: ModelSpec, u_init: StationaryStrategy, s0, m0, grid: StrategyGrid,
                        max_iters: int = 200, damping: float = 0.5, tolerance: float = 1e-6,
                        move_tol: float = 1e-6, tagged_linear: bool = False) -> Certificate:
    """Damped best-response iteration ``u <- (1 - a) u + a BR(u)``.

    Stops when ``u`` moves less than ``move_tol``; the result is snapped to the
    nearest grid point when that point is within ``10 move_tol``.  The final
    epsilon comes from an exhaustive grid sweep.
    """
    if not 0 < damping <= 1:
        raise ModelError("damping must lie in (0, 1]")
    mass = _mass(spec, m0)
    u = u_init
    history = [u]
    converged = False
    cycling = False
    it = 0
    for it in range(1, max_iters + 1):
        br = best_response(spec, u, s0, mass, grid, tolerance, tagged_linear)
        new = u.mix(br.strategy, damping)
        move = new.distance(u)
        if move < move_tol:
            u = new
            converged = True
            break
        if any(new.distance(h) < 1e-9 for h in history[:-1]):
            cycling = True
            u = new
            break
        history.append(new)
        u = new
    snap = grid.nearest(u)
    if snap.distance(u) <= 10 * move_tol:
        u = snap
    cert = certify(spec, u, s0, mass, grid, "equilibrium", tolerance, converged)
    cert.extra.update({"iterations": it, "cycling": cycling, "damping": damping})
    return cert


def team_values(spec: ModelSpec, strategies: Sequence[StationaryStrategy], s0, m0,
                tolerance: float = 1e-6) -> np.ndarray:
    """Symmetric values ``R(u, u; s0, m0)``: one forward field and one value solve per ``u``."""
    mass = _mass(spec, m0)
    s_idx = spec.space.internal_states.index(s0)
    out = np.empty(len(strategies))
    for i, u in enumerate(strategies):
        path = mf.field_path(spec, u, mass, tolerance)
        out[i] = mf.solve_values(path, [u], spec.discount)[0, s_idx]
    return out


def optimize_team(spec: ModelSpec, s0, m0, grid: StrategyGrid, tolerance: float = 1e-6) -> Certificate:
    pts = grid.points()
    mass = _mass(spec, m0)
    vals = team_values(spec, pts, s0, mass, tolerance)
    i = _first_max(vals)
    return Certificate(pts[i], float(vals[i]), float(max(vals.max() - vals[i], 0.0)), "team-optimal",
                       grid.delta, s0, list(mass), True, {"grid_values": vals.tolist()})


def stationary_certificate(spec: ModelSpec, u: StationaryStrategy, grid: StrategyGrid, m0=None) -> Certificate:
    """Grid epsilon for the stationary payoff ``R_st`` at the attractor of ``u``."""
    own = mf.stationary_payoff(spec, u, u, m0)
    best = -math.inf
    for v in grid.points():
        try:
            best = max(best, mf.stationary_payoff(spec, v, u, own.m_star).value)
        except mf.ReducibleGeneratorError:
            continue
    return Certificate(u, own.value, float(max(best - own.value, 0.0)), "equilibrium-stationary",
                       grid.delta, None, list(own.m_star), True)


# ------------------------------------------------------------------ finite N

@dataclass
class GapRow:
    N: int
    value: float
    std_error: float
    limit_value: float
    abs_error: float
    epsilon: float
    ci_low: float
    ci_high: float
    best_probe: dict
    m0_used: list

    @property
    def significant(self) -> bool:
        return self.ci_low > 0


def finite_N_gap(spec: ModelSpec, u: StationaryStrategy, s0, m0, N_list: Sequence[int],
                 replications: int, seed: int = 1, probes: Sequence[StationaryStrategy] | None = None,
                 tolerance: float = 1e-6, z: float = Z99, tail_tol: float | None = None) -> list[GapRow]:
    """Empirical epsilon of ``u`` in the N-player game with common random numbers.

    ``m0`` is rounded to the ``1/(N-1)`` grid for the other players at each ``N``.
    """
    mass = _mass(spec, m0)
    if probes is None:
        probes = [v for v in StrategyGrid(spec.space, 1.0).points() if v.distance(u) > 0]
    limit = mf.tagged_value(spec, u, u, s0, mass, tolerance).values[s0]
    rows = []
    for N in N_list:
        m_N = nearest_grid_counts(mass, N - 1) / (N - 1)
        base = ms.estimate_discounted_payoff(spec, u, u, s0, m_N, N, replications, seed, tail_tol)
        best = (-math.inf, 0.0, None)
        for v in probes:
            dev = ms.estimate_discounted_payoff(spec, v, u, s0, m_N, N, replications, seed, tail_tol)
            d = dev.samples - base.samples
            gap = float(d.mean())
            se = float(np.std(d, ddof=1) / math.sqrt(len(d)))
            if gap > best[0]:
                best = (gap, se, v)
        gap, se, v = best
        if v is None:
            gap, se = 0.0, 0.0
        rows.append(GapRow(int(N), base.mean, base.std_error, limit, abs(base.mean - limit), gap,
                           gap - z * se, gap + z * se, v.to_json() if v is not None else {},
                           [float(x) for x in m_N]))
    return rows
