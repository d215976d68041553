"""Limit layer: drift, ODE integration, tagged-player generator and values.

Event expectations are compiled once per model into tables indexed by the
ordered tuple of participant states.  Strategies enter only through products
of action probabilities, so a batch of strategies is evaluated with a few
array contractions.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components

from .model import (
    ModelError,
    ModelSpec,
    PopulationProfile,
    StateSpace,
    StationaryStrategy,
    Trajectory,
)

DEFAULT_STEP = 1e-3
ENUMERATION_CAP = 10_000_000
SIMPLEX_EXIT_TOL = 1e-9


class SimplexExitError(ModelError):
    pass


class AttractorError(ModelError):
    def __init__(self, msg: str, report: "AttractorResult"):
        super().__init__(msg)
        self.report = report


class ReducibleGeneratorError(ModelError):
    def __init__(self, msg: str, classes: list[list]):
        super().__init__(msg)
        self.classes = classes


# ------------------------------------------------------------------ compilation

@dataclass
class _EventTable:
    """All ``(states, actions)`` configurations of one interaction size ``k``."""

    k: int
    states: np.ndarray       # (n, k) flat state index per position
    acts: np.ndarray         # (n, k) action index, A_max for "no action"
    tuple_idx: np.ndarray    # (n,) flat index of the state tuple
    delta: np.ndarray        # (n, X) expected change of counts
    next_dist: np.ndarray    # (n, k, S) law of each participant's next internal state
    gain: np.ndarray         # (n, k) expected gain per position


@dataclass
class CompiledModel:
    spec: ModelSpec
    a_max: int
    tables: dict[int, _EventTable]
    spont: np.ndarray         # (X, S) off-diagonal spontaneous rates
    terms: int

    @property
    def space(self) -> StateSpace:
        return self.spec.space


_COMPILED: dict[int, CompiledModel] = {}


def _count_terms(spec: ModelSpec, ks: Sequence[int]) -> int:
    sizes = [max(1, len(a)) for a in spec.space.actions]
    per_slot = sum(sizes)
    return sum(per_slot ** k for k in ks)


def active_sizes(spec: ModelSpec) -> list[int]:
    law = spec.interaction
    if law.profile_dependent:
        return list(range(1, law.k_max + 1))
    pmf = law.pmf()
    return [k for k in range(1, law.k_max + 1) if pmf[k] > 0]


def compile_model(spec: ModelSpec, m: PopulationProfile | None = None,
                  cap: int = ENUMERATION_CAP) -> CompiledModel:
    """Enumerate every event configuration.  Cached for profile-free kernels."""
    key = id(spec)
    if m is None and not spec.kernel.profile_dependent and key in _COMPILED:
        cm = _COMPILED[key]
        if cm.spec is spec:
            return cm
    if spec.kernel.profile_dependent and m is None:
        raise ModelError("profile-dependent kernel needs a profile to compile")
    space = spec.space
    X, S = space.size, space.n_internal
    a_max = max((len(a) for a in space.actions), default=0)
    ks = active_sizes(spec)
    terms = _count_terms(spec, ks)
    if terms > cap:
        raise ModelError(
            f"enumeration needs {terms} terms (cap {cap}); use the Monte Carlo drift mode "
            f"(mode='mc', samples=...)")
    states = space.states()
    tables = {}
    for k in ks:
        rows_s, rows_a, rows_t, rows_d, rows_n, rows_g = [], [], [], [], [], []
        for idx in itertools.product(range(X), repeat=k):
            xs = [states[i] for i in idx]
            types = tuple(x[0] for x in xs)
            ss = tuple(x[1] for x in xs)
            opts = [range(len(space.actions[i])) if space.actions[i] else (a_max,) for i in idx]
            t_idx = 0
            for i in idx:
                t_idx = t_idx * X + i
            for aidx in itertools.product(*opts):
                acts = tuple(space.actions[i][a] if a < a_max and space.actions[i] else None
                             for i, a in zip(idx, aidx))
                dist = spec.kernel(k, types, ss, acts, m)
                delta = np.zeros(X)
                nd = np.zeros((k, S))
                gn = np.zeros(k)
                for nxt, p in dist.items():
                    if p == 0:
                        continue
                    nxs = [(t, s) for t, s in zip(types, nxt)]
                    for j in range(k):
                        si = space.internal_states.index(nxt[j])
                        nd[j, si] += p
                        delta[space.index(types[j], nxt[j])] += p
                        delta[idx[j]] -= p
                        others = [q for q in range(k) if q != j]
                        gn[j] += p * spec.gain(xs[j], acts[j], nxs[j],
                                               tuple(xs[q] for q in others),
                                               tuple(acts[q] for q in others),
                                               tuple(nxs[q] for q in others))
                rows_s.append(idx)
                rows_a.append(aidx)
                rows_t.append(t_idx)
                rows_d.append(delta)
                rows_n.append(nd)
                rows_g.append(gn)
        tables[k] = _EventTable(k, np.array(rows_s, dtype=int).reshape(-1, k),
                                np.array(rows_a, dtype=int).reshape(-1, k),
                                np.array(rows_t, dtype=int), np.array(rows_d),
                                np.array(rows_n).reshape(-1, k, S), np.array(rows_g).reshape(-1, k))
    spont = np.zeros((X, S))
    if spec.spontaneous is not None:
        for i, (theta, s) in enumerate(states):
            for s2, rate in spec.spontaneous.rates(theta, s).items():
                if s2 != s:
                    spont[i, space.internal_states.index(s2)] += rate
    cm = CompiledModel(spec, a_max, tables, spont, terms)
    if m is None:
        _COMPILED[key] = cm
    return cm


def action_array(space: StateSpace, strategies, a_max: int | None = None) -> np.ndarray:
    """Stack strategies into ``(C, X, A_max + 1)``; the last column is the no-action slot."""
    if isinstance(strategies, StationaryStrategy):
        strategies = [strategies]
    if a_max is None:
        a_max = max((len(a) for a in space.actions), default=0)
    out = np.zeros((len(strategies), space.size, a_max + 1))
    for c, u in enumerate(strategies):
        if u.space != space:
            raise ModelError("strategy built for a different state space")
        for x, row in enumerate(u.probs):
            out[c, x, :len(row)] = row
    out[:, :, a_max] = 1.0
    return out


def _weights(U: np.ndarray, states: np.ndarray, acts: np.ndarray, skip: int | None = None) -> np.ndarray:
    """``(C, n)`` products of action probabilities, optionally skipping one position."""
    w = np.ones((U.shape[0], states.shape[0]))
    for j in range(states.shape[1]):
        if j != skip:
            w *= U[:, states[:, j], acts[:, j]]
    return w


def _kron_power(m: np.ndarray, k: int) -> np.ndarray:
    """``(B, X^k)`` ordered-tuple probabilities for ``m`` of shape ``(B, X)``."""
    B, X = m.shape
    out = np.ones((B, 1))
    for _ in range(k):
        out = (out[:, :, None] * m[:, None, :]).reshape(B, -1)
    return out


def _pmf_rows(spec: ModelSpec, m: np.ndarray) -> np.ndarray:
    law = spec.interaction
    if not law.profile_dependent:
        return np.broadcast_to(law.pmf(), (m.shape[0], law.k_max + 1))
    rows = []
    for row in m:
        clean = np.clip(row, 0.0, None)
        rows.append(law.pmf(PopulationProfile(spec.space, clean / clean.sum())))
    return np.array(rows)


# ------------------------------------------------------------------------ drift

class DriftField:
    """``f(u, m)`` for one strategy or a stack of strategies (one per batch row)."""

    def __init__(self, spec: ModelSpec, u, compiled: CompiledModel | None = None):
        self.spec = spec
        self.strategies = [u] if isinstance(u, StationaryStrategy) else list(u)
        self.profile_dependent = spec.kernel.profile_dependent
        X = spec.space.size
        self.X = X
        if not self.profile_dependent:
            cm = compiled or compile_model(spec)
            self._build(cm)
        self.spont_gen = None

    def _build(self, cm: CompiledModel):
        X = self.X
        U = action_array(self.spec.space, self.strategies, cm.a_max)
        self.tensors = {}
        for k, tab in cm.tables.items():
            W = _weights(U, tab.states, tab.acts)
            D = np.zeros((X ** k, U.shape[0], X))
            np.add.at(D, tab.tuple_idx, (W[:, :, None] * tab.delta[None]).transpose(1, 0, 2))
            self.tensors[k] = D.transpose(1, 0, 2)  # (C, X^k, X)
        G = np.zeros((X, X))
        space = self.spec.space
        for x in range(X):
            theta = space.state_at(x)[0]
            for si in range(space.n_internal):
                r = cm.spont[x, si]
                if r:
                    G[x, (theta - 1) * space.n_internal + si] += r
                    G[x, x] -= r
        self.spont = G

    @property
    def batch(self) -> int:
        return len(self.strategies)

    def __call__(self, m: np.ndarray) -> np.ndarray:
        """``m`` has shape ``(X,)`` or ``(B, X)`` with ``B`` equal to 1 or the strategy count."""
        m = np.asarray(m, dtype=float)
        single = m.ndim == 1
        mb = m[None] if single else m
        if self.profile_dependent:
            out = np.stack([self._slow(row, c if self.batch > 1 else 0) for c, row in enumerate(mb)])
        else:
            pmf = _pmf_rows(self.spec, mb)
            out = mb @ self.spont
            for k, D in self.tensors.items():
                mk = _kron_power(mb, k)
                if D.shape[0] == 1:
                    out = out + pmf[:, k:k + 1] * (mk @ D[0])
                else:
                    out = out + pmf[:, k:k + 1] * np.einsum("bt,btx->bx", mk, D)
        return out[0] if single else out

    def _slow(self, row: np.ndarray, c: int) -> np.ndarray:
        clean = np.clip(row, 0.0, None)
        prof = PopulationProfile(self.spec.space, clean / clean.sum())
        cm = compile_model(self.spec, prof)
        sub = DriftField.__new__(DriftField)
        sub.spec, sub.strategies, sub.X = self.spec, [self.strategies[c]], self.X
        sub.profile_dependent = False
        sub._build(cm)
        pmf = _pmf_rows(self.spec, row[None])
        out = row @ sub.spont
        for k, D in sub.tensors.items():
            out = out + pmf[0, k] * (_kron_power(row[None], k) @ D[0])[0]
        return out


def drift(spec: ModelSpec, u: StationaryStrategy, m: PopulationProfile | np.ndarray,
          mode: str = "exact", samples: int = 100_000, seed: int = 0) -> np.ndarray:
    """Mass flow ``f(u, m)`` over the flat state set."""
    mass = m.mass if isinstance(m, PopulationProfile) else np.asarray(m, dtype=float)
    if mode == "exact":
        return DriftField(spec, u)(mass)
    if mode == "mc":
        return drift_monte_carlo(spec, u, mass, samples, seed)
    raise ModelError(f"unknown drift mode {mode!r}")


def drift_monte_carlo(spec: ModelSpec, u: StationaryStrategy, mass: np.ndarray,
                      samples: int, seed: int = 0) -> np.ndarray:
    """Sampled version of :func:`drift` for models too large to enumerate."""
    rng = np.random.default_rng(seed)
    space = spec.space
    X = space.size
    prof = PopulationProfile(space, mass)
    pmf = spec.interaction.pmf(prof)
    m_arg = prof if spec.kernel.profile_dependent else None
    states = space.states()
    acc = np.zeros(X)
    ks = rng.choice(len(pmf), size=samples, p=pmf)
    for k in ks:
        if k == 0:
            continue
        idx = rng.choice(X, size=k, p=mass)
        xs = [states[i] for i in idx]
        acts = []
        for i in idx:
            row = u.probs[i]
            acts.append(space.actions[i][rng.choice(len(row), p=row)] if row else None)
        dist = spec.kernel(k, tuple(x[0] for x in xs), tuple(x[1] for x in xs), tuple(acts), m_arg)
        outs = list(dist.items())
        j = rng.choice(len(outs), p=np.array([p for _, p in outs]) / sum(p for _, p in outs))
        for i, (x, s2) in zip(idx, zip(xs, outs[j][0])):
            acc[i] -= 1
            acc[space.index(x[0], s2)] += 1
    out = acc / samples
    if spec.spontaneous is not None:
        cm_sp = np.zeros(X)
        for i, (theta, s) in enumerate(states):
            for s2, r in spec.spontaneous.rates(theta, s).items():
                if s2 != s:
                    cm_sp[space.index(theta, s2)] += mass[i] * r
                    cm_sp[i] -= mass[i] * r
        out = out + cm_sp
    return out


# ------------------------------------------------------------------ integration

POLY_TERM_CAP = 4000


def _polynomial(field: DriftField, c: int = 0):
    """Collect ``f`` for strategy ``c`` into ``{x: {exponents: coef}}`` or ``None``."""
    if field.profile_dependent or field.spec.interaction.profile_dependent:
        return None
    X = field.X
    pmf = field.spec.interaction.pmf()
    polys = [dict() for _ in range(X)]
    for x in range(X):
        for y in range(X):
            coef = field.spont[y, x]
            if coef:
                e = [0] * X
                e[y] = 1
                polys[x][tuple(e)] = polys[x].get(tuple(e), 0.0) + coef
    for k, D in field.tensors.items():
        if not pmf[k]:
            continue
        Dc = D[c if D.shape[0] > 1 else 0]
        for t, idx in enumerate(itertools.product(range(X), repeat=k)):
            row = Dc[t]
            if not row.any():
                continue
            e = [0] * X
            for i in idx:
                e[i] += 1
            e = tuple(e)
            for x in range(X):
                if row[x]:
                    polys[x][e] = polys[x].get(e, 0.0) + pmf[k] * row[x]
    if sum(len(p) for p in polys) > POLY_TERM_CAP:
        return None
    return polys


def _monomial(e) -> str:
    parts = []
    for i, p in enumerate(e):
        parts.extend([f"m{i}"] * p)
    return "*".join(parts) if parts else "1.0"


def _compile_rk4(polys):
    """Generate a pure-Python RK4 loop; much cheaper than array calls for tiny systems."""
    X = len(polys)
    args = ", ".join(f"m{i}" for i in range(X))
    exprs = []
    for p in polys:
        terms = [f"{float(coef)!r}*{_monomial(e)}" for e, coef in sorted(p.items()) if coef != 0.0]
        exprs.append(" + ".join(terms) if terms else "0.0")
    src = [f"def f({args}):", f"    return ({', '.join(exprs)},)", "",
           "def run(m, h, n, out):",
           "    hh = 0.5 * h",
           "    h6 = h / 6.0",
           f"    ({args},) = m",
           "    for _ in range(n):"]
    idx = range(X)
    src.append(f"        a = f({args})")
    src.append("        b = f(" + ", ".join(f"m{i} + hh*a[{i}]" for i in idx) + ")")
    src.append("        c = f(" + ", ".join(f"m{i} + hh*b[{i}]" for i in idx) + ")")
    src.append("        d = f(" + ", ".join(f"m{i} + h*c[{i}]" for i in idx) + ")")
    for i in idx:
        src.append(f"        m{i} = m{i} + h6*(a[{i}] + 2.0*(b[{i}] + c[{i}]) + d[{i}])")
    src.append(f"        out.append(({args},))")
    src.append("    return out")
    ns: dict = {}
    exec("\n".join(src), ns)
    return ns["f"], ns["run"]


def _fast_runner(field: DriftField, c: int = 0):
    cache = field.__dict__.setdefault("_runners", {})
    if c not in cache:
        polys = _polynomial(field, c)
        cache[c] = _compile_rk4(polys)[1] if polys is not None else None
    return cache[c]


def _rk4(field, m0: np.ndarray, h: float, n_steps: int) -> np.ndarray:
    out = np.empty((n_steps + 1,) + m0.shape)
    out[0] = m = m0
    half = 0.5 * h
    sixth = h / 6.0
    for i in range(n_steps):
        k1 = field(m)
        k2 = field(m + half * k1)
        k3 = field(m + half * k2)
        k4 = field(m + h * k3)
        m = m + sixth * (k1 + 2.0 * (k2 + k3) + k4)
        out[i + 1] = m
    return out


def _type_sums(space: StateSpace, arr: np.ndarray) -> np.ndarray:
    return arr.reshape(arr.shape[:-1] + (space.type_count, space.n_internal)).sum(-1)


def _enforce_simplex(space: StateSpace, traj: np.ndarray, m0: np.ndarray) -> np.ndarray:
    sums = _type_sums(space, traj)
    ref = _type_sums(space, m0)
    exit_ = max(float(np.max(np.abs(sums - ref))), float(max(0.0, -traj.min())))
    if exit_ > SIMPLEX_EXIT_TOL:
        raise SimplexExitError(
            f"drift inconsistent with mass conservation (simplex exit {exit_:.3g})")
    if exit_ > 1e-12:
        warnings.warn(f"renormalizing trajectory after simplex exit {exit_:.2e}", RuntimeWarning)
        traj = np.clip(traj, 0.0, None)
        scale = ref[None] / _type_sums(space, traj)
        traj = (traj.reshape(traj.shape[:-1] + (space.type_count, space.n_internal))
                * scale[..., None]).reshape(traj.shape)
    return traj


def _as_mass(space: StateSpace, m0) -> np.ndarray:
    if isinstance(m0, PopulationProfile):
        return np.array(m0.mass)
    arr = np.asarray(m0, dtype=float)
    if arr.shape[-1] != space.size:
        raise ModelError(f"profile has {arr.shape[-1]} entries, state space has {space.size}")
    for row in arr.reshape(-1, space.size):
        PopulationProfile(space, row)
    return arr


def integrate_batch(field: DriftField, m0: np.ndarray, T: float, h: float = DEFAULT_STEP,
                    even: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """RK4 for a batch ``m0`` of shape ``(B, X)``; returns ``(times, (K, B, X))``."""
    if not T > 0:
        raise ModelError("horizon must be positive")
    n = max(1, math.ceil(T / h - 1e-9))
    if even and n % 2:
        n += 1
    h = T / n
    B = m0.shape[0]
    runners = None
    if B <= 8 and (field.batch == 1 or field.batch == B):
        runners = [_fast_runner(field, b if field.batch > 1 else 0) for b in range(B)]
        if any(r is None for r in runners):
            runners = None
    if runners is not None:
        traj = np.empty((n + 1, B, m0.shape[1]))
        for b, run in enumerate(runners):
            traj[:, b] = np.array(run(tuple(m0[b].tolist()), h, n, [tuple(m0[b].tolist())]))
    else:
        traj = _rk4(field, m0, h, n)
    traj = _enforce_simplex(field.spec.space, traj, m0)
    return np.linspace(0.0, T, n + 1), traj


def integrate_ode(spec: ModelSpec, u: StationaryStrategy, m0, T: float, h: float = DEFAULT_STEP,
                  error_estimate: bool = True) -> Trajectory:
    """Classical RK4 with fixed step ``h``.

    With ``error_estimate`` a second pass at ``2h`` gives the Richardson estimate
    ``max |m_h - m_2h| / 15`` reported in ``meta["error_estimate"]``.
    """
    if not T > 0:
        raise ModelError("horizon must be positive")
    space = spec.space
    mass = _as_mass(space, m0)
    fld = DriftField(spec, u)
    times, traj = integrate_batch(fld, mass[None], T, h, even=error_estimate)
    meta = {"strategy": u.to_json(), "step": float(times[1] - times[0])}
    if error_estimate:
        _, coarse = integrate_batch(fld, mass[None], T, 2 * (times[1] - times[0]))
        meta["error_estimate"] = float(np.max(np.abs(traj[::2] - coarse)) / 15.0)
    return Trajectory(space, times, traj[:, 0], "inf", meta)


# ----------------------------------------------------------------- tagged player

@dataclass
class TaggedTensors:
    """Rates and rewards of the tagged player, linear in its own action probabilities.

    ``P[k]`` has shape ``(S, A+1, X^(k-1), S)`` and ``G[k]`` ``(S, A+1, X^(k-1))``;
    contraction with ``m^(k-1)`` and ``J_k`` gives rates ``Q`` and rewards ``R``.
    """

    spec: ModelSpec
    tagged_type: int
    rows: np.ndarray            # flat state index of (tagged_type, s)
    P: dict[int, np.ndarray]
    G: dict[int, np.ndarray]
    spont: np.ndarray           # (S, S)
    a_max: int

    def rates(self, m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """For ``m`` of shape ``(K, X)`` return ``Q (K, S, A+1, S)`` and ``R (K, S, A+1)``."""
        m = np.atleast_2d(m)
        pmf = _pmf_rows(self.spec, m)
        K = m.shape[0]
        S = len(self.rows)
        Q = np.zeros((K, S, self.a_max + 1, S))
        R = np.zeros((K, S, self.a_max + 1))
        for k in self.P:
            mk = _kron_power(m, k - 1)
            Q += pmf[:, k, None, None, None] * np.einsum("ty,sayz->tsaz", mk, self.P[k])
            R += pmf[:, k, None, None] * np.einsum("ty,say->tsa", mk, self.G[k])
        Q += self.spont[None, :, None, :]
        return Q, R


def tagged_tensors(spec: ModelSpec, u2: StationaryStrategy, tagged_type: int = 1,
                   compiled: CompiledModel | None = None) -> TaggedTensors:
    if spec.kernel.profile_dependent:
        raise ModelError("tagged tensors need a profile-free kernel; use jump_generator per profile")
    cm = compiled or compile_model(spec)
    space = spec.space
    X, S = space.size, space.n_internal
    rows = np.array([space.index(tagged_type, s) for s in space.internal_states])
    row_pos = {int(x): i for i, x in enumerate(rows)}
    U2 = action_array(space, [u2], cm.a_max)
    P, G = {}, {}
    for k, tab in cm.tables.items():
        Pk = np.zeros((S, cm.a_max + 1, X ** (k - 1), S))
        Gk = np.zeros((S, cm.a_max + 1, X ** (k - 1)))
        for i in range(k):
            mine = np.isin(tab.states[:, i], rows)
            if not mine.any():
                continue
            st, ac = tab.states[mine], tab.acts[mine]
            w = _weights(U2, st, ac, skip=i)[0]
            others = [j for j in range(k) if j != i]
            o_idx = np.zeros(st.shape[0], dtype=int)
            for j in others:
                o_idx = o_idx * X + st[:, j]
            s_idx = np.array([row_pos[int(x)] for x in st[:, i]])
            np.add.at(Pk, (s_idx, ac[:, i], o_idx), w[:, None] * tab.next_dist[mine, i])
            np.add.at(Gk, (s_idx, ac[:, i], o_idx), w * tab.gain[mine, i])
        P[k], G[k] = Pk, Gk
    spont = cm.spont[rows].copy()
    return TaggedTensors(spec, tagged_type, rows, P, G, spont, cm.a_max)


def own_actions(tt: TaggedTensors, strategies) -> np.ndarray:
    """``(C, S, A+1)`` action probabilities of the tagged player."""
    U = action_array(tt.spec.space, strategies, tt.a_max)
    return U[:, tt.rows, :]


def generator_from_rates(Q: np.ndarray) -> np.ndarray:
    """Zero the diagonal of a jump-rate array ``(..., S, S)`` and put minus the row sums on it."""
    S = Q.shape[-1]
    eye = np.eye(S, dtype=bool)
    A = np.where(eye, 0.0, Q)
    return A - np.eye(S) * A.sum(-1, keepdims=True)


@dataclass
class JumpGenerator:
    internal_states: tuple
    matrix: np.ndarray
    reward: np.ndarray

    def rate(self, s, s2) -> float:
        i = self.internal_states.index(s)
        j = self.internal_states.index(s2)
        return float(self.matrix[i, j])


def jump_generator(spec: ModelSpec, u1: StationaryStrategy, u2: StationaryStrategy,
                   m: PopulationProfile | np.ndarray, tagged_type: int = 1) -> JumpGenerator:
    """Tagged-player generator and instant reward rate at profile ``m``."""
    mass = _as_mass(spec.space, m)
    if spec.kernel.profile_dependent:
        cm = compile_model(spec, PopulationProfile(spec.space, mass))
    else:
        cm = compile_model(spec)
    tt = tagged_tensors(spec, u2, tagged_type, cm)
    Q, R = tt.rates(mass[None])
    own = own_actions(tt, [u1])[0]
    rates = np.einsum("sa,saz->sz", own, Q[0])
    rew = np.einsum("sa,sa->s", own, R[0])
    return JumpGenerator(spec.space.internal_states, generator_from_rates(rates), rew)


# ---------------------------------------------------------------------- values

@dataclass
class ValueTable:
    values: dict
    horizon: float
    tolerance: float
    vector: np.ndarray
    meta: dict = field(default_factory=dict)

    def __getitem__(self, s) -> float:
        return self.values[s]


def reward_bound(spec: ModelSpec) -> float:
    """Upper bound on the tagged reward rate: mean interaction size times ``C0``."""
    law = spec.interaction
    if law.profile_dependent:
        kbar = law.k_max
    else:
        kbar = float(np.arange(law.k_max + 1) @ law.pmf())
    return max(kbar, 1e-300) * spec.gain.bound


def value_horizon(spec: ModelSpec, tolerance: float, sup_r: float | None = None) -> float:
    if not tolerance > 0:
        raise ModelError("tolerance must be positive")
    beta = spec.discount
    sup_r = reward_bound(spec) if sup_r is None else sup_r
    return max(math.log(max(sup_r / (beta * tolerance), 1.0)) / beta, 1.0)


@dataclass
class FieldPath:
    """Forward field path under ``u2`` with tagged rates at every knot."""

    times: np.ndarray
    mass: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    horizon: float
    tt: TaggedTensors


def field_path(spec: ModelSpec, u2: StationaryStrategy, m0, tolerance: float = 1e-6,
               h: float = DEFAULT_STEP, tagged_type: int = 1, horizon: float | None = None) -> FieldPath:
    """Forward ODE under ``u2`` only; the tagged player's strategy never enters here."""
    mass = _as_mass(spec.space, m0)
    T = value_horizon(spec, tolerance) if horizon is None else horizon
    fld = DriftField(spec, u2)
    times, traj = integrate_batch(fld, mass[None], T, h, even=True)
    traj = traj[:, 0]
    tt = tagged_tensors(spec, u2, tagged_type)
    Q, R = tt.rates(traj)
    return FieldPath(times, traj, Q, R, T, tt)


def solve_values(path: FieldPath, strategies, beta: float) -> np.ndarray:
    """Backward RK4 for ``dV/dt = beta V - r - A V`` with ``V(T) = 0``; returns ``(C, S)`` at ``t = 0``.

    The step is twice the forward step so every stage lands on a stored knot.
    """
    own = own_actions(path.tt, strategies)
    C, S = own.shape[0], own.shape[1]
    K = len(path.times)
    H = 2.0 * (path.times[1] - path.times[0])
    if C * S * S <= 32:
        out = np.empty((C, S))
        for c in range(C):
            A = generator_from_rates(np.einsum("sa,tsaz->tsz", own[c], path.Q))
            r = np.einsum("sa,tsa->ts", own[c], path.R)
            out[c] = _backward_python(A.tolist(), r.tolist(), beta, H, S)
        return out
    chunk = max(1, int(4e6 // max(1, K * S * S)))
    out = np.empty((C, S))
    for c0 in range(0, C, chunk):
        sl = slice(c0, c0 + chunk)
        A = generator_from_rates(np.einsum("csa,tsaz->ctsz", own[sl], path.Q))
        r = np.einsum("csa,tsa->cts", own[sl], path.R)
        v = np.zeros((own[sl].shape[0], S))

        def F(j, v):
            return beta * v - r[:, j] - np.einsum("csz,cz->cs", A[:, j], v)

        j = K - 1
        while j > 0:
            k1 = F(j, v)
            k2 = F(j - 1, v - 0.5 * H * k1)
            k3 = F(j - 1, v - 0.5 * H * k2)
            k4 = F(j - 2, v - H * k3)
            v = v - (H / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
            j -= 2
        out[sl] = v
    return out


_BACKWARD: dict[int, object] = {}


def _backward_python(A: list, r: list, beta: float, H: float, S: int) -> list:
    """Unrolled backward RK4 for a single small system (generated once per ``S``)."""
    if S not in _BACKWARD:
        rng = range(S)

        def F(prefix, j, vs):
            return [f"{prefix}{s} = beta*{vs[s]} - r[{j}][{s}] - ("
                    + " + ".join(f"A[{j}][{s}][{z}]*{vs[z]}" for z in rng) + ")" for s in rng]

        v = [f"v{s}" for s in rng]
        src = ["def run(A, r, beta, H):", "    hh = 0.5*H", "    h6 = H/6.0"]
        src += [f"    v{s} = 0.0" for s in rng]
        src += ["    j = len(A) - 1", "    while j > 0:", "        i = j - 1", "        l = j - 2"]
        src += ["        " + e for e in F("a", "j", v)]
        src += ["        " + e for e in F("b", "i", [f"(v{s} - hh*a{s})" for s in rng])]
        src += ["        " + e for e in F("c", "i", [f"(v{s} - hh*b{s})" for s in rng])]
        src += ["        " + e for e in F("d", "l", [f"(v{s} - H*c{s})" for s in rng])]
        src += [f"        v{s} = v{s} - h6*(a{s} + 2.0*(b{s} + c{s}) + d{s})" for s in rng]
        src += ["        j = l", "    return [" + ", ".join(v) + "]"]
        ns: dict = {}
        exec("\n".join(src), ns)
        _BACKWARD[S] = ns["run"]
    return _BACKWARD[S](A, r, beta, H)


def tagged_values(spec: ModelSpec, u1_list, u2: StationaryStrategy, m0, tolerance: float = 1e-6,
                  h: float = DEFAULT_STEP, tagged_type: int = 1,
                  path: FieldPath | None = None) -> np.ndarray:
    """Values ``R(u1, u2; s, m0)`` for several tagged strategies at once, shape ``(C, S)``."""
    if not tolerance > 0:
        raise ModelError("tolerance must be positive")
    if path is None:
        path = field_path(spec, u2, m0, tolerance, h, tagged_type)
    return solve_values(path, u1_list, spec.discount)


def tagged_value(spec: ModelSpec, u1: StationaryStrategy, u2: StationaryStrategy, s0, m0,
                 tolerance: float = 1e-6, h: float = DEFAULT_STEP, tagged_type: int = 1) -> ValueTable:
    """Discounted value of a tagged player using ``u1`` against a field using ``u2``.

    ``values`` covers every internal state; ``s0`` selects ``meta["value"]``.
    """
    if not tolerance > 0:
        raise ModelError("tolerance must be positive")
    path = field_path(spec, u2, m0, tolerance, h, tagged_type)
    vec = solve_values(path, [u1], spec.discount)[0]
    states = spec.space.internal_states
    values = {s: float(v) for s, v in zip(states, vec)}
    if s0 not in values:
        raise ModelError(f"unknown internal state {s0!r}")
    own = own_actions(path.tt, [u1])[0]
    sup_r = float(np.max(np.abs(np.einsum("sa,tsa->ts", own, path.R))))
    return ValueTable(values, path.horizon, tolerance, vec,
                      {"value": values[s0], "s0": s0, "sup_r": sup_r})


# ------------------------------------------------------------------- attractors

@dataclass
class AttractorResult:
    profile: np.ndarray
    residual: float
    time: float
    converged: bool
    newton_steps: int = 0


def _reduced(space: StateSpace):
    S = space.n_internal
    keep = [i for i in range(space.size) if (i % S) != S - 1]
    return np.array(keep)


def _newton(field: DriftField, m: np.ndarray, space: StateSpace, tol: float = 1e-13,
            max_iter: int = 50, fd: float = 1e-6) -> tuple[np.ndarray, int]:
    keep = _reduced(space)
    S = space.n_internal
    tmass = _type_sums(space, m)

    def full(z):
        out = np.zeros(space.size)
        out[keep] = z
        grid = out.reshape(space.type_count, S)
        grid[:, -1] = tmass - grid[:, :-1].sum(1)
        return out

    def F(z):
        return field(full(z))[keep]

    z = m[keep].copy()
    fz = F(z)
    steps = 0
    for steps in range(1, max_iter + 1):
        if np.max(np.abs(fz)) < tol:
            break
        n = len(z)
        J = np.empty((n, n))
        for j in range(n):
            dz = np.zeros(n)
            dz[j] = fd
            J[:, j] = (F(z + dz) - F(z - dz)) / (2 * fd)
        try:
            step = np.linalg.solve(J, -fz)
        except np.linalg.LinAlgError:
            break
        lam = 1.0
        while lam > 1e-4:
            zn = z + lam * step
            mn = full(zn)
            if mn.min() >= -1e-12:
                fn = F(zn)
                if np.max(np.abs(fn)) < np.max(np.abs(fz)):
                    z, fz = zn, fn
                    break
            lam *= 0.5
        else:
            break
    return np.clip(full(z), 0.0, None), steps


def attractor(spec_or_field, u: StationaryStrategy | None, m0, horizon_cap: float = 500.0,
              h: float = 1e-2, tol: float = 1e-10) -> AttractorResult:
    """Integrate until ``|f|_inf < tol`` and refine the end point by damped Newton."""
    fld = spec_or_field if isinstance(spec_or_field, DriftField) else DriftField(spec_or_field, u)
    space = fld.spec.space
    m = _as_mass(space, m0).astype(float)
    t = 0.0
    chunk = 100
    while True:
        traj = _rk4(fld, m, h, chunk)
        m = traj[-1]
        t += chunk * h
        res = float(np.max(np.abs(fld(m))))
        if res < tol or t >= horizon_cap:
            break
    if res >= 1e-6:
        raise AttractorError(f"no attractor detected from m0 (residual {res:.3g} at t={t:g})",
                             AttractorResult(m, res, t, False))
    m_ref, steps = _newton(fld, m, space)
    res_ref = float(np.max(np.abs(fld(m_ref))))
    if res_ref <= res:
        m, res = m_ref, res_ref
    m = m / _type_sums(space, m).repeat(space.n_internal) * _type_sums(space, _as_mass(space, m0)).repeat(space.n_internal)
    return AttractorResult(m, res, t, res < max(tol, 1e-9), steps)


# --------------------------------------------------------------- stationarity

def closed_classes(A: np.ndarray, labels: Sequence) -> list[list]:
    """Closed communicating classes of the support graph of a generator."""
    adj = (np.abs(A) > 0) & ~np.eye(len(A), dtype=bool)
    n, lab = connected_components(adj.astype(int), directed=True, connection="strong")
    out = []
    for c in range(n):
        members = np.nonzero(lab == c)[0]
        leaves = adj[members][:, [j for j in range(len(A)) if lab[j] != c]].any()
        if not leaves:
            out.append([labels[i] for i in members])
    return out


def stationary_distribution(A: np.ndarray, labels: Sequence | None = None) -> np.ndarray:
    labels = list(range(len(A))) if labels is None else list(labels)
    if len(A) == 1:
        return np.ones(1)
    adj = (np.abs(A) > 0) & ~np.eye(len(A), dtype=bool)
    n, _ = connected_components(adj.astype(int), directed=True, connection="strong")
    if n > 1:
        cls = closed_classes(A, labels)
        raise ReducibleGeneratorError(f"reducible generator; closed classes {cls}", cls)
    M = np.vstack([A.T, np.ones(len(A))])
    b = np.zeros(len(A) + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(M, b, rcond=None)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


@dataclass
class StationaryPayoff:
    pi: dict
    value: float
    m_star: np.ndarray
    values: dict


def stationary_payoff(spec: ModelSpec, u1: StationaryStrategy, u2: StationaryStrategy,
                      m0=None, tagged_type: int = 1) -> StationaryPayoff:
    """``R_st = sum_s pi(s) R(u1, u2; s, m*)`` with ``pi A = 0`` at the attractor ``m*``.

    At a rest point the value equation is time-homogeneous, so
    ``V = (beta I - A)^{-1} r`` is solved directly.
    """
    m0 = spec.uniform_profile() if m0 is None else m0
    res = attractor(spec, u2, m0)
    gen = jump_generator(spec, u1, u2, res.profile, tagged_type)
    labels = spec.space.internal_states
    pi = stationary_distribution(gen.matrix, labels)
    S = len(labels)
    V = np.linalg.solve(spec.discount * np.eye(S) - gen.matrix, gen.reward)
    return StationaryPayoff({s: float(p) for s, p in zip(labels, pi)}, float(pi @ V), res.profile,
                            {s: float(v) for s, v in zip(labels, V)})
