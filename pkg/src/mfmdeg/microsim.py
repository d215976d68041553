"""Finite-N simulation at step 1/N.

Each slot draws an interaction size ``k``, an ordered list of ``k`` distinct
players (partial Fisher-Yates), one action per participant and a joint outcome
from the kernel.  Only participants move and collect a gain.

Replications run side by side in one array engine.  Every replication owns a
Philox stream derived from ``(seed, replication)`` and consumes a fixed number
of uniforms per slot, so results do not depend on how replications are batched
or spread over workers.
"""

from __future__ import annotations

import itertools
import math
import multiprocessing as mp
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .model import (
    ModelError,
    ModelSpec,
    PopulationProfile,
    StationaryStrategy,
    Trajectory,
    grid_counts,
    profile_from_counts,
)

MEMORY_FLOATS = 4_000_000


def stream(seed: int, rep: int = 0) -> np.random.Generator:
    """Independent counter-based generator for replication ``rep`` of ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(rep,))))


def worker_count() -> int:
    raw = os.environ.get("MFMDEG_THREADS", "")
    try:
        n = int(raw) if raw else 1
    except ValueError:
        raise ModelError(f"MFMDEG_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(n, os.cpu_count() or 1))


_TASK: Callable | None = None


def _run_task(arg):
    return _TASK(arg)


def parallel_map(fn: Callable, items: Sequence, workers: int | None = None) -> list:
    """Ordered map; forks ``workers`` processes when more than one is allowed."""
    global _TASK
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(items) <= 1 or "fork" not in mp.get_all_start_methods():
        return [fn(x) for x in items]
    _TASK = fn
    try:
        with mp.get_context("fork").Pool(min(workers, len(items))) as pool:
            return pool.map(_run_task, items)
    finally:
        _TASK = None


# ----------------------------------------------------------------------- types

@dataclass
class MicroState:
    """Flat state index of every player plus the slot counter.

    ``perm`` is the sampler's running permutation; keeping it makes repeated
    :func:`step` calls reproduce :func:`simulate` draw for draw.
    """

    spec: ModelSpec
    players: np.ndarray
    clock: int = 0
    perm: np.ndarray | None = None

    @property
    def N(self) -> int:
        return len(self.players)

    @property
    def time(self) -> float:
        return self.clock / self.N

    def counts(self) -> np.ndarray:
        return np.bincount(self.players, minlength=self.spec.space.size)

    def profile(self) -> PopulationProfile:
        space = self.spec.space
        c = self.counts()
        return profile_from_counts(space, {x: int(v) for x, v in zip(space.states(), c)}, self.N)

    @classmethod
    def from_counts(cls, spec: ModelSpec, counts: Sequence[int], first: int | None = None) -> MicroState:
        """Players laid out in state order; ``first`` puts that state's player at index 0."""
        counts = np.asarray(counts, dtype=int)
        players = np.repeat(np.arange(spec.space.size), counts)
        if first is not None:
            players = np.concatenate([[first], np.repeat(np.arange(spec.space.size), counts)])
        return cls(spec, players.astype(np.int64), 0)

    @classmethod
    def from_profile(cls, spec: ModelSpec, m, N: int) -> MicroState:
        mass = m.mass if isinstance(m, PopulationProfile) else np.asarray(m, dtype=float)
        return cls.from_counts(spec, grid_counts(mass, N))


@dataclass
class EventRecord:
    step: int
    participants: list
    actions: list
    next_states: list
    gains: list

    def to_json(self) -> dict:
        return {"step": self.step, "participants": self.participants, "actions": self.actions,
                "next_states": self.next_states, "gains": self.gains}


@dataclass
class PayoffEstimate:
    mean: float
    std_error: float
    replications: int
    truncation_horizon: float
    samples: np.ndarray | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {"mean": self.mean, "std_error": self.std_error,
                "replications": self.replications, "horizon": self.truncation_horizon}


# ---------------------------------------------------------------------- engine

class Engine:
    """Array simulator for ``B`` independent copies of an ``N``-player system.

    ``u_tagged`` (if given) is the strategy of player 0 in every copy.
    """

    def __init__(self, spec: ModelSpec, u: StationaryStrategy, N: int,
                 u_tagged: StationaryStrategy | None = None):
        space = spec.space
        self.spec, self.N = spec, N
        self.X, self.S = space.size, space.n_internal
        law = spec.interaction
        self.k_max = law.k_max
        self.a_max = max((len(a) for a in space.actions), default=0)
        self.n_act = np.array([len(a) for a in space.actions])
        self.act_cdf = self._act_cdf(u)
        self.tag_cdf = self._act_cdf(u_tagged) if u_tagged is not None else None
        self.k_cdf = None if law.profile_dependent else np.cumsum(law.pmf())
        self.ks = [k for k in range(1, law.k_max + 1)
                   if law.profile_dependent or law.pmf()[k] > 0]
        self.d = spec.spontaneous.draws(space) if spec.spontaneous is not None else 0
        self.width = 2 + 2 * self.k_max + 2 * self.d
        self.tables = {} if spec.kernel.profile_dependent else {k: self._table(k) for k in self.ks}
        if self.d:
            self._spont_tables()

    # ---- tables
    def _act_cdf(self, u: StationaryStrategy) -> np.ndarray:
        if u.space != self.spec.space:
            raise ModelError("strategy built for a different state space")
        cdf = np.full((self.X, max(self.a_max, 1)), 2.0)
        for x, row in enumerate(u.probs):
            if row:
                c = np.cumsum(row)
                c[-1] = 2.0
                cdf[x, :len(row)] = c
        return cdf

    def _code(self, st: np.ndarray, ac: np.ndarray) -> np.ndarray:
        base = self.X * (self.a_max + 1)
        code = np.zeros(st.shape[0], dtype=np.int64)
        for j in range(st.shape[1]):
            code = code * base + st[:, j] * (self.a_max + 1) + ac[:, j]
        return code

    def _table(self, k: int):
        spec, space = self.spec, self.spec.space
        base = self.X * (self.a_max + 1)
        size = base ** k
        if size > 5_000_000:
            raise ModelError(f"event table for k={k} too large ({size} entries)")
        outs = {}
        states = space.states()
        for idx in itertools.product(range(self.X), repeat=k):
            opts = [range(len(space.actions[i])) if space.actions[i] else (self.a_max,) for i in idx]
            for aidx in itertools.product(*opts):
                acts = tuple(space.actions[i][a] if space.actions[i] else None for i, a in zip(idx, aidx))
                xs = [states[i] for i in idx]
                types = tuple(x[0] for x in xs)
                dist = spec.kernel(k, types, tuple(x[1] for x in xs), acts, None)
                lst = []
                for nxt, p in dist.items():
                    if p <= 0:
                        continue
                    nxs = [(t, s) for t, s in zip(types, nxt)]
                    nidx = [space.index(t, s) for t, s in nxs]
                    gains = []
                    for j in range(k):
                        o = [q for q in range(k) if q != j]
                        gains.append(spec.gain(xs[j], acts[j], nxs[j], tuple(xs[q] for q in o),
                                               tuple(acts[q] for q in o), tuple(nxs[q] for q in o)))
                    lst.append((p, nidx, gains))
                code = int(self._code(np.array([idx]), np.array([aidx]))[0])
                outs[code] = lst
        o_max = max(len(v) for v in outs.values())
        cdf = np.full((size, o_max), 2.0)
        nxt = np.zeros((size, o_max, k), dtype=np.int64)
        gn = np.zeros((size, o_max, k))
        n_out = np.ones(size, dtype=np.int64)
        for code, lst in outs.items():
            c = np.cumsum([p for p, _, _ in lst])
            c[-1] = 2.0
            cdf[code, :len(lst)] = c
            n_out[code] = len(lst)
            for o, (_, nidx, gains) in enumerate(lst):
                nxt[code, o] = nidx
                gn[code, o] = gains
        return cdf, nxt, gn, n_out

    def _spont_tables(self):
        space = self.spec.space
        cdf = np.full((self.X, self.S), 2.0)
        tgt = np.zeros((self.X, self.S), dtype=np.int64)
        for x, (theta, s) in enumerate(space.states()):
            acc = 0.0
            j = 0
            for s2, r in space_rates(self.spec, theta, s):
                acc += r / self.d
                cdf[x, j] = acc
                tgt[x, j] = space.index(theta, s2)
                j += 1
        self.sp_cdf, self.sp_tgt = cdf, tgt

    # ---- dynamics
    def draw_k(self, u: np.ndarray, counts: np.ndarray) -> np.ndarray:
        if self.k_cdf is not None:
            k = np.searchsorted(self.k_cdf, u, side="right")
        else:
            k = np.empty(len(u), dtype=np.int64)
            for b in range(len(u)):
                c = counts[b]
                pmf = self.spec.interaction.pmf(PopulationProfile(self.spec.space, c / c.sum()))
                k[b] = np.searchsorted(np.cumsum(pmf), u[b], side="right")
        k = np.minimum(k, self.k_max)
        if np.any(k > self.N):
            raise ModelError("interaction larger than population")
        return k

    def step(self, players: np.ndarray, perm: np.ndarray, counts: np.ndarray, U: np.ndarray,
             want_record: bool = False):
        """Advance every copy by one slot.  ``U`` has shape ``(B, width)``.

        Returns the gain of player 0 per copy (and the event records if asked).
        """
        B = players.shape[0]
        N = self.N
        km = self.k_max
        k = self.draw_k(U[:, 0], counts)
        tag_gain = np.zeros(B)
        records = [None] * B if want_record else None
        for kk in np.unique(k):
            kk = int(kk)
            if kk == 0:
                if want_record:
                    for b in np.nonzero(k == 0)[0]:
                        records[b] = ([], [], [], [])
                continue
            rows = np.nonzero(k == kk)[0] if len(np.unique(k)) > 1 else np.arange(B)
            for i in range(kk):
                j = i + np.minimum((U[rows, 1 + i] * (N - i)).astype(np.int64), N - i - 1)
                a = perm[rows, i].copy()
                perm[rows, i] = perm[rows, j]
                perm[rows, j] = a
            pid = perm[rows, :kk]
            st = players[rows[:, None], pid]
            ac = np.empty_like(st)
            for j in range(kk):
                cdf = self.act_cdf[st[:, j]]
                if self.tag_cdf is not None:
                    mine = pid[:, j] == 0
                    if mine.any():
                        cdf = np.where(mine[:, None], self.tag_cdf[st[:, j]], cdf)
                a = (U[rows, 1 + km + j][:, None] >= cdf).sum(1)
                ac[:, j] = np.where(self.n_act[st[:, j]] == 0, self.a_max, a)
            if self.spec.kernel.profile_dependent:
                nxt, gn = self._slow_outcomes(kk, st, ac, counts[rows], U[rows, 1 + 2 * km])
            else:
                cdf, nxt_t, gn_t, n_out = self.tables[kk]
                code = self._code(st, ac)
                o = (U[rows, 1 + 2 * km][:, None] >= cdf[code]).sum(1)
                o = np.minimum(o, n_out[code] - 1)
                nxt = nxt_t[code, o]
                gn = gn_t[code, o]
            rr = np.repeat(rows, kk)
            np.subtract.at(counts, (rr, st.ravel()), 1)
            np.add.at(counts, (rr, nxt.ravel()), 1)
            players[rows[:, None], pid] = nxt
            tag_gain[rows] = (gn * (pid == 0)).sum(1)
            if want_record:
                for r, b in enumerate(rows):
                    records[b] = (pid[r].tolist(), ac[r].tolist(), nxt[r].tolist(), gn[r].tolist())
        if self.d:
            base = 2 + 2 * km
            for q in range(self.d):
                p = np.minimum((U[:, base + 2 * q] * N).astype(np.int64), N - 1)
                ar = np.arange(B)
                x = players[ar, p]
                t = (U[:, base + 2 * q + 1][:, None] >= self.sp_cdf[x]).sum(1)
                move = t < self.S
                move &= self.sp_cdf[x, np.minimum(t, self.S - 1)] <= 1.0
                if move.any():
                    mb = ar[move]
                    new = self.sp_tgt[x[move], t[move]]
                    np.subtract.at(counts, (mb, x[move]), 1)
                    np.add.at(counts, (mb, new), 1)
                    players[mb, p[move]] = new
        return tag_gain, records

    def _slow_outcomes(self, k, st, ac, counts, u):
        spec, space = self.spec, self.spec.space
        states = space.states()
        nxt = np.empty_like(st)
        gn = np.empty(st.shape)
        for r in range(st.shape[0]):
            m = PopulationProfile(space, counts[r] / counts[r].sum())
            xs = [states[i] for i in st[r]]
            acts = tuple(space.actions[i][a] if space.actions[i] else None for i, a in zip(st[r], ac[r]))
            types = tuple(x[0] for x in xs)
            dist = list(spec.kernel(k, types, tuple(x[1] for x in xs), acts, m).items())
            c = np.cumsum([p for _, p in dist])
            o = min(int(np.searchsorted(c, u[r], side="right")), len(dist) - 1)
            out = dist[o][0]
            nxs = [(t, s) for t, s in zip(types, out)]
            nxt[r] = [space.index(t, s) for t, s in nxs]
            for j in range(k):
                oth = [q for q in range(k) if q != j]
                gn[r, j] = spec.gain(xs[j], acts[j], nxs[j], tuple(xs[q] for q in oth),
                                     tuple(acts[q] for q in oth), tuple(nxs[q] for q in oth))
        return nxt, gn


def space_rates(spec: ModelSpec, theta, s):
    return [(s2, r) for s2, r in spec.spontaneous.rates(theta, s).items() if s2 != s and r > 0]


# ------------------------------------------------------------------- public ops

def step(spec: ModelSpec, u: StationaryStrategy, state: MicroState, rng: np.random.Generator,
         u_tagged: StationaryStrategy | None = None) -> tuple[MicroState, EventRecord]:
    """One slot of the N-player dynamics; the input state is left untouched."""
    eng = Engine(spec, u, state.N, u_tagged)
    players = state.players.astype(np.int64).copy()[None]
    if state.perm is None:
        perm = np.arange(state.N, dtype=np.int64)[None]
    else:
        perm = state.perm.astype(np.int64).copy()[None]
    counts = np.bincount(players[0], minlength=eng.X)[None].astype(np.int64)
    U = rng.random((1, eng.width))
    _, rec = eng.step(players, perm, counts, U, want_record=True)
    space = spec.space
    pid, ac, nxt, gn = rec[0]
    before = state.players
    acts = [space.actions[int(before[p])][a] if space.actions[int(before[p])] else None
            for p, a in zip(pid, ac)]
    record = EventRecord(state.clock, [int(p) for p in pid], acts,
                         [space.state_at(int(x)) for x in nxt], [float(g) for g in gn])
    return MicroState(spec, players[0], state.clock + 1, perm[0]), record


def _uniform_blocks(gens: list, steps: int, width: int):
    B = len(gens)
    chunk = max(1, min(steps, MEMORY_FLOATS // max(1, B * width)))
    done = 0
    while done < steps:
        n = min(chunk, steps - done)
        yield np.stack([g.random((n, width)) for g in gens], axis=0)
        done += n


@dataclass
class _RunResult:
    disc_gain: np.ndarray
    disc_expected: np.ndarray | None
    record_mass: np.ndarray | None
    record_steps: np.ndarray | None
    sup_dev: np.ndarray | None
    tagged_path: np.ndarray | None
    final_players: np.ndarray


def run_batch(spec: ModelSpec, u: StationaryStrategy, counts0: np.ndarray, N: int, steps: int,
              seeds: Sequence[tuple[int, int]], u_tagged: StationaryStrategy | None = None,
              tagged_state: int | None = None, stride: int = 0, reference: np.ndarray | None = None,
              expected_payoff: Callable | None = None) -> _RunResult:
    """Core loop shared by every public entry point.

    ``counts0`` are the counts of the players other than player 0 when
    ``tagged_state`` is given, otherwise of the whole population.
    """
    eng = Engine(spec, u, N, u_tagged)
    B = len(seeds)
    gens = [stream(s, r) for s, r in seeds]
    if tagged_state is not None:
        base = MicroState.from_counts(spec, counts0, first=tagged_state).players
    else:
        base = MicroState.from_counts(spec, counts0).players
    if len(base) != N:
        raise ModelError(f"initial state has {len(base)} players, expected N = {N}")
    players = np.tile(base, (B, 1))
    perm = np.tile(np.arange(N, dtype=np.int64), (B, 1))
    counts = np.tile(np.bincount(base, minlength=eng.X).astype(np.int64), (B, 1))
    beta = spec.discount
    disc = np.zeros(B)
    disc_exp = np.zeros(B) if expected_payoff is not None else None
    rec_steps = np.arange(0, steps + 1, stride) if stride else None
    rec = np.empty((len(rec_steps), B, eng.X)) if stride else None
    tpath = np.empty((len(rec_steps), B), dtype=np.int64) if (stride and tagged_state is not None) else None
    sup = None
    if reference is not None:
        sup = np.max(np.abs(counts / N - reference[0]), axis=1)
    ri = 0
    n = 0

    def record():
        nonlocal ri
        if stride and ri < len(rec_steps) and rec_steps[ri] == n:
            rec[ri] = counts / N
            if tpath is not None:
                tpath[ri] = players[:, 0]
            ri += 1

    record()
    for block in _uniform_blocks(gens, steps, eng.width):
        for i in range(block.shape[1]):
            w = math.exp(-beta * n / N)
            if disc_exp is not None:
                disc_exp += w * expected_payoff(players[:, 0], counts)
            g, _ = eng.step(players, perm, counts, block[:, i])
            disc += w * g
            n += 1
            if sup is not None:
                np.maximum(sup, np.max(np.abs(counts / N - reference[n]), axis=1), out=sup)
            record()
    return _RunResult(disc, disc_exp, rec, rec_steps, sup, tpath, players)


def _thinning(N: int, full: bool) -> int:
    return 1 if full else max(1, math.ceil(N / 100))


def simulate(spec: ModelSpec, u: StationaryStrategy, initial: MicroState, horizon_T: float, seed: int,
             rep: int = 0, full_record: bool = False, stride: int | None = None,
             u_tagged: StationaryStrategy | None = None) -> Trajectory:
    """Run ``ceil(N T)`` slots and record the profile every ``stride`` slots.

    With ``u_tagged`` player 0 follows it and its path is kept.
    """
    if not horizon_T > 0:
        raise ModelError("horizon must be positive")
    N = initial.N
    steps = math.ceil(N * horizon_T - 1e-9)
    stride = stride or _thinning(N, full_record)
    eng_counts = np.bincount(initial.players, minlength=spec.space.size)
    tagged_state = None
    if u_tagged is not None:
        tagged_state = int(initial.players[0])
        eng_counts = np.bincount(initial.players[1:], minlength=spec.space.size)
    res = run_batch(spec, u, eng_counts, N, steps, [(seed, rep)], u_tagged, tagged_state, stride)
    times = res.record_steps / N
    traj = Trajectory(spec.space, times, res.record_mass[:, 0], N,
                      {"seed": seed, "rep": rep, "strategy": u.to_json(), "stride": stride})
    if res.tagged_path is not None:
        traj.tagged_path = res.tagged_path[:, 0]
    return traj


def truncation_horizon(spec: ModelSpec, N: int, tail_tol: float | None = None) -> float:
    """Smallest ``T*`` with ``exp(-beta T*) C0 / (1 - exp(-beta/N)) <= tail_tol``."""
    beta, C0 = spec.discount, spec.gain.bound
    if tail_tol is None:
        tail_tol = 1e-6 * C0 / beta
    if C0 == 0:
        return 1.0 / N
    geo = C0 / (-math.expm1(-beta / N))
    return max(math.log(geo / tail_tol) / beta, 1.0 / N)


def _tagged_counts(spec: ModelSpec, m, N: int, tagged_type: int, s0) -> tuple[np.ndarray, int]:
    mass = m.mass if isinstance(m, PopulationProfile) else np.asarray(m, dtype=float)
    counts = grid_counts(mass, N - 1)
    return counts, spec.space.index(tagged_type, s0)


def _rep_blocks(replications: int, workers: int) -> list[list[int]]:
    if workers <= 1:
        return [list(range(replications))]
    size = math.ceil(replications / workers)
    return [list(range(i, min(i + size, replications))) for i in range(0, replications, size)]


def estimate_discounted_payoff(spec: ModelSpec, u1: StationaryStrategy, u2: StationaryStrategy, s0,
                               initial_profile, N: int, replications: int, seed: int,
                               tail_tol: float | None = None, tagged_type: int = 1,
                               workers: int | None = None) -> PayoffEstimate:
    """Monte Carlo ``R^N(u1, u2; s0, m)`` for player 0.

    ``initial_profile`` describes the other ``N - 1`` players and must sit on the
    ``1/(N-1)`` grid; player 0 starts at ``(tagged_type, s0)``.
    """
    est, _ = _payoff_runs(spec, u1, u2, s0, initial_profile, N, replications, seed, tail_tol,
                          tagged_type, workers, expected=False)
    return est


def _payoff_runs(spec, u1, u2, s0, initial_profile, N, replications, seed, tail_tol, tagged_type,
                 workers, expected):
    if replications < 2:
        raise ModelError("replications must be >= 2 for a variance estimate")
    counts, x0 = _tagged_counts(spec, initial_profile, N, tagged_type, s0)
    T = truncation_horizon(spec, N, tail_tol)
    steps = math.ceil(N * T - 1e-9)
    exp_fn = ExpectedPayoff(spec, u1, u2, N, tagged_type) if expected else None
    workers = worker_count() if workers is None else workers

    def task(reps):
        res = run_batch(spec, u2, counts, N, steps, [(seed, r) for r in reps], u1, x0,
                        expected_payoff=exp_fn)
        return res.disc_gain, res.disc_expected

    parts = parallel_map(task, _rep_blocks(replications, workers), workers)
    gains = np.concatenate([p[0] for p in parts])
    est = _estimate(gains, T)
    est_exp = _estimate(np.concatenate([p[1] for p in parts]), T) if expected else None
    return est, est_exp


def _estimate(samples: np.ndarray, T: float) -> PayoffEstimate:
    n = len(samples)
    se = float(np.std(samples, ddof=1) / math.sqrt(n))
    return PayoffEstimate(float(np.mean(samples)), se, n, T, samples)


class ExpectedPayoff:
    """Conditional mean gain of player 0 over one slot, given its state and the counts.

    Other participants are drawn without replacement from the remaining
    ``N - 1`` players; enumerated exactly while the tuple count stays small,
    otherwise estimated by nested sampling.
    """

    def __init__(self, spec: ModelSpec, u1: StationaryStrategy, u2: StationaryStrategy, N: int,
                 tagged_type: int = 1, enum_cap: int = 20_000, nested: int = 256, seed: int = 0):
        from .meanfield import own_actions, tagged_tensors

        if spec.kernel.profile_dependent or spec.interaction.profile_dependent:
            raise ModelError("expected-payoff estimator needs profile-free J and kernel")
        tt = tagged_tensors(spec, u2, tagged_type)
        own = own_actions(tt, [u1])[0]
        self.N = N
        self.X = spec.space.size
        self.pmf = spec.interaction.pmf()
        self.local = {int(x): i for i, x in enumerate(tt.rows)}
        self.row_of = np.full(self.X, -1)
        for x, i in self.local.items():
            self.row_of[x] = i
        self.G = {k: np.einsum("sa,say->sy", own, Gk) for k, Gk in tt.G.items()}
        self.enum_cap = enum_cap
        self.nested = nested
        self.rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(2**31,))))
        self.tuples = {k: np.array(list(itertools.product(range(self.X), repeat=k - 1)), dtype=np.int64)
                       .reshape(-1, k - 1)
                       for k in self.G if self.X ** (k - 1) <= enum_cap}

    def __call__(self, tagged: np.ndarray, counts: np.ndarray) -> np.ndarray:
        N = self.N
        B = len(tagged)
        others = counts.astype(float).copy()
        others[np.arange(B), tagged] -= 1
        srow = self.row_of[tagged]
        out = np.zeros(B)
        for k, Gk in self.G.items():
            if not self.pmf[k] or k > N:
                continue
            g = Gk[srow]  # (B, X^(k-1))
            if k == 1:
                val = g[:, 0]
            elif k in self.tuples:
                tup = self.tuples[k]
                prob = np.ones((B, len(tup)))
                for j in range(k - 1):
                    prior = (tup[:, :j] == tup[:, j:j + 1]).sum(1)
                    prob *= np.clip(others[:, tup[:, j]] - prior[None], 0, None) / (N - 1 - j)
                val = (prob * g).sum(1)
            else:
                val = self._nested(k, g, others)
            out += self.pmf[k] * val / N
        return out

    def _nested(self, k, g, others):
        B = g.shape[0]
        N = self.N
        acc = np.zeros(B)
        for _ in range(self.nested):
            rem = others.copy()
            idx = np.zeros(B, dtype=np.int64)
            for j in range(k - 1):
                cum = np.cumsum(rem, axis=1)
                u = self.rng.random(B) * (N - 1 - j)
                x = (u[:, None] >= cum).sum(1)
                rem[np.arange(B), x] -= 1
                idx = idx * self.X + x
            acc += g[np.arange(B), idx]
        return acc / self.nested


@dataclass
class EquivalenceReport:
    gain_based: PayoffEstimate
    expected_based: PayoffEstimate
    difference: float
    combined_se: float
    z: float
    paired_se: float

    @property
    def agree(self) -> bool:
        return abs(self.z) < 3.0


def check_payoff_equivalence(spec: ModelSpec, u1: StationaryStrategy, u2: StationaryStrategy, s0,
                             initial_profile, N: int, replications: int, seed: int,
                             tail_tol: float | None = None, tagged_type: int = 1,
                             workers: int | None = None) -> EquivalenceReport:
    """Realized-gain estimator versus the expected-instant-payoff estimator on the same paths."""
    g, e = _payoff_runs(spec, u1, u2, s0, initial_profile, N, replications, seed, tail_tol,
                        tagged_type, workers, expected=True)
    diff = g.mean - e.mean
    comb = math.hypot(g.std_error, e.std_error)
    paired = float(np.std(g.samples - e.samples, ddof=1) / math.sqrt(g.replications))
    z = diff / comb if comb > 0 else (0.0 if diff == 0 else math.inf)
    return EquivalenceReport(g, e, diff, comb, z, paired)


# ------------------------------------------------------------------ convergence

@dataclass
class ConvergenceTable:
    rows: list[tuple[int, int, float]]
    mean_sup: dict[int, float]
    exceedance: dict[int, dict[float, float]]
    eps_grid: tuple

    def csv(self) -> str:
        lines = ["N,seed,sup_dev"]
        lines += [f"{N},{s},{d!r}" for N, s, d in self.rows]
        return "\n".join(lines) + "\n"


def convergence_study(spec: ModelSpec, u: StationaryStrategy, m0, T: float, N_list: Sequence[int],
                      seeds: Sequence[int], eps_grid: Sequence[float] = (0.01, 0.02, 0.05, 0.1),
                      h: float = 1e-3, workers: int | None = None) -> ConvergenceTable:
    """``sup_t |M^N(t) - m(t)|_inf`` per ``(N, seed)``, checked at every slot."""
    from .meanfield import integrate_ode

    if not T > 0:
        raise ModelError("horizon must be positive")
    mass = m0.mass if isinstance(m0, PopulationProfile) else np.asarray(m0, dtype=float)
    for N in N_list:
        grid_counts(mass, N)
    ode = integrate_ode(spec, u, mass, T, h=h, error_estimate=False)
    workers = worker_count() if workers is None else workers
    rows = []
    for N in N_list:
        steps = math.ceil(N * T - 1e-9)
        ref = ode.at(np.arange(steps + 1) / N)
        counts = grid_counts(mass, N)

        def task(block, N=N, steps=steps, ref=ref, counts=counts):
            res = run_batch(spec, u, counts, N, steps, [(s, 0) for s in block], reference=ref)
            return res.sup_dev

        blocks = [list(seeds)] if workers <= 1 else [list(b) for b in np.array_split(list(seeds), workers) if len(b)]
        sup = np.concatenate(parallel_map(task, blocks, workers))
        rows += [(int(N), int(s), float(d)) for s, d in zip(seeds, sup)]
    mean_sup, exc = {}, {}
    for N in N_list:
        d = np.array([r[2] for r in rows if r[0] == N])
        mean_sup[int(N)] = float(d.mean())
        exc[int(N)] = {float(e): float(np.mean(d > e)) for e in eps_grid}
    return ConvergenceTable(rows, mean_sup, exc, tuple(eps_grid))
