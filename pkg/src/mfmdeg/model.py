"""Game description shared by the finite-N simulator and the mean-field layer.

A model is a finite set of player states ``(type, internal state)``, a law for
the number ``k`` of players drawn into each event, a joint transition kernel
for the participants' next internal states, and a bounded gain function.
Everything here is immutable once built.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Iterable, Mapping, Sequence

import numpy as np

Label = Hashable
PlayerState = tuple[int, Label]

SIMPLEX_TOL = 1e-12


class ModelError(ValueError):
    """Raised for malformed model components or inputs."""


@dataclass(frozen=True)
class StateSpace:
    """Types ``1..type_count`` times ordered internal states, with action sets.

    ``actions`` is stored flat, in the order of :meth:`states`.  Build instances
    with :meth:`build`.
    """

    type_count: int
    internal_states: tuple
    actions: tuple[tuple, ...]

    def __post_init__(self):
        if self.type_count < 1:
            raise ModelError("type_count must be >= 1")
        if not self.internal_states:
            raise ModelError("internal state set must be nonempty")
        if len(set(self.internal_states)) != len(self.internal_states):
            raise ModelError("internal states must be distinct")
        if len(self.actions) != self.size:
            raise ModelError(
                f"expected {self.size} action sets, got {len(self.actions)}")

    @classmethod
    def build(cls, type_count: int, internal_states: Iterable[Label],
              actions: Sequence | Mapping | Callable = ()) -> StateSpace:
        """``actions`` may be one tuple for every state, a mapping keyed by
        ``(type, s)`` or by ``s``, or a callable ``(type, s) -> tuple``."""
        internal_states = tuple(internal_states)
        flat = []
        for theta in range(1, type_count + 1):
            for s in internal_states:
                if callable(actions):
                    acts = actions(theta, s)
                elif isinstance(actions, Mapping):
                    if (theta, s) in actions:
                        acts = actions[(theta, s)]
                    else:
                        acts = actions.get(s, ())
                else:
                    acts = actions
                flat.append(tuple(acts))
        if isinstance(actions, Mapping):
            for key in actions:
                if isinstance(key, tuple) and len(key) == 2 and key[1] in internal_states:
                    if not 1 <= key[0] <= type_count:
                        raise ModelError(f"action key {key!r} outside the state set")
                elif key not in internal_states:
                    raise ModelError(f"action key {key!r} outside the state set")
        return cls(type_count, internal_states, tuple(flat))

    @property
    def size(self) -> int:
        return self.type_count * len(self.internal_states)

    @property
    def n_internal(self) -> int:
        return len(self.internal_states)

    def states(self) -> list[PlayerState]:
        return [(theta, s) for theta in range(1, self.type_count + 1)
                for s in self.internal_states]

    def index(self, theta: int, s: Label) -> int:
        try:
            si = self.internal_states.index(s)
        except ValueError:
            raise ModelError(f"unknown internal state {s!r}") from None
        if not 1 <= theta <= self.type_count:
            raise ModelError(f"unknown type {theta!r}")
        return (theta - 1) * self.n_internal + si

    def state_at(self, i: int) -> PlayerState:
        theta, si = divmod(i, self.n_internal)
        return theta + 1, self.internal_states[si]

    def actions_at(self, theta: int, s: Label) -> tuple:
        return self.actions[self.index(theta, s)]


@dataclass(frozen=True, eq=False)
class PopulationProfile:
    """Point of the simplex over ``(type, internal state)``; flat mass vector."""

    space: StateSpace
    mass: np.ndarray

    def __post_init__(self):
        mass = np.asarray(self.mass, dtype=float).reshape(-1)
        if mass.shape != (self.space.size,):
            raise ModelError(
                f"profile has {mass.size} entries, state space has {self.space.size}")
        if np.any(mass < -1e-9) or abs(mass.sum() - 1.0) > 1e-9:
            raise ModelError(f"profile is not on the simplex (sum={mass.sum()!r})")
        mass.setflags(write=False)
        object.__setattr__(self, "mass", mass)

    @classmethod
    def from_mapping(cls, space: StateSpace, mass: Mapping[PlayerState, float]) -> PopulationProfile:
        vec = np.zeros(space.size)
        for (theta, s), v in mass.items():
            vec[space.index(theta, s)] = v
        return cls(space, vec)

    def __getitem__(self, x: PlayerState) -> float:
        return float(self.mass[self.space.index(*x)])

    def type_mass(self) -> np.ndarray:
        return self.mass.reshape(self.space.type_count, -1).sum(axis=1)

    def as_dict(self) -> dict[PlayerState, float]:
        return {x: float(v) for x, v in zip(self.space.states(), self.mass)}

    def simplex_error(self) -> float:
        return max(abs(float(self.mass.sum()) - 1.0), float(max(0.0, -self.mass.min())))


def profile_from_counts(space: StateSpace, counts: Mapping[PlayerState, int], N: int) -> PopulationProfile:
    """Empirical occupancy measure of ``N`` players."""
    total = sum(counts.values())
    if total != N:
        raise ModelError(f"counts sum to {total} but N = {N}")
    if any(c < 0 for c in counts.values()):
        raise ModelError("counts must be nonnegative")
    vec = np.zeros(space.size)
    for (theta, s), c in counts.items():
        vec[space.index(theta, s)] = c / N
    return PopulationProfile(space, vec)


def nearest_grid_counts(mass: Sequence[float], n: int) -> np.ndarray:
    """Largest-remainder rounding of ``n * mass`` to integers summing to ``n``."""
    mass = np.asarray(mass, dtype=float)
    raw = mass * n
    base = np.floor(raw + 1e-9).astype(int)
    short = n - int(base.sum())
    if short > 0:
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:short]] += 1
    elif short < 0:
        order = np.argsort(raw - base, kind="stable")
        base[order[:-short]] -= 1
    return base


def grid_counts(mass: Sequence[float], n: int) -> np.ndarray:
    """Exact counts ``n * mass``; raises if ``mass`` is off the ``1/n`` grid."""
    raw = np.asarray(mass, dtype=float) * n
    counts = np.rint(raw).astype(int)
    if np.max(np.abs(raw - counts)) > 1e-9 * max(n, 1) or counts.sum() != n:
        near = nearest_grid_counts(mass, n) / n
        raise ModelError(
            f"profile {list(np.round(mass, 12))} is not on the 1/{n} grid; "
            f"nearest grid point is {[float(v) for v in near]}")
    return counts


@dataclass(frozen=True)
class StationaryStrategy:
    """Action distribution per ``(type, internal state)``; rows follow ``space.states()``."""

    space: StateSpace
    probs: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        if len(self.probs) != self.space.size:
            raise ModelError("strategy must give one distribution per state")
        rows = []
        for acts, row in zip(self.space.actions, self.probs):
            row = tuple(float(p) for p in row)
            if len(row) != len(acts):
                raise ModelError(f"distribution {row} does not match actions {acts}")
            if acts:
                if min(row) < -1e-12 or abs(sum(row) - 1.0) > 1e-9:
                    raise ModelError(f"invalid action distribution {row}")
                row = tuple(max(p, 0.0) for p in row)
            rows.append(row)
        object.__setattr__(self, "probs", tuple(rows))

    @classmethod
    def from_mapping(cls, space: StateSpace, policy: Mapping, default: str = "uniform") -> StationaryStrategy:
        """``policy`` maps ``(type, s)`` (or ``s``) to a probability vector or an action."""
        rows = []
        for (theta, s), acts in zip(space.states(), space.actions):
            spec = policy.get((theta, s), policy.get(s)) if policy else None
            if not acts:
                rows.append(())
            elif spec is None:
                if default != "uniform":
                    raise ModelError(f"no policy for state {(theta, s)}")
                rows.append(tuple(1.0 / len(acts) for _ in acts))
            elif isinstance(spec, (str, int)) and not isinstance(spec, bool) and spec in acts:
                rows.append(tuple(1.0 if a == spec else 0.0 for a in acts))
            else:
                rows.append(tuple(spec))
        return cls(space, tuple(rows))

    @classmethod
    def uniform(cls, space: StateSpace) -> StationaryStrategy:
        return cls.from_mapping(space, {})

    def dist(self, theta: int, s: Label) -> tuple[float, ...]:
        return self.probs[self.space.index(theta, s)]

    def prob(self, theta: int, s: Label, a) -> float:
        acts = self.space.actions_at(theta, s)
        return self.dist(theta, s)[acts.index(a)]

    def distance(self, other: StationaryStrategy) -> float:
        """Sup-norm distance between the two probability arrays."""
        return max((abs(p - q) for r1, r2 in zip(self.probs, other.probs)
                    for p, q in zip(r1, r2)), default=0.0)

    def mix(self, other: StationaryStrategy, alpha: float) -> StationaryStrategy:
        """``(1 - alpha) * self + alpha * other``."""
        rows = tuple(tuple((1 - alpha) * p + alpha * q for p, q in zip(r1, r2))
                     for r1, r2 in zip(self.probs, other.probs))
        return StationaryStrategy(self.space, rows)

    def to_json(self) -> dict[str, dict[str, float]]:
        out = {}
        for (theta, s), acts, row in zip(self.space.states(), self.space.actions, self.probs):
            if acts:
                out[f"{theta}:{s}"] = {str(a): p for a, p in zip(acts, row)}
        return out


@dataclass(frozen=True)
class InteractionLaw:
    """Distribution ``J_k(m)`` of the number of players in one event, ``k <= k_max``.

    ``size_pmf`` is either a fixed probability vector of length ``k_max + 1`` or a
    callable taking a :class:`PopulationProfile`.
    """

    size_pmf: Any
    k_max: int

    def __post_init__(self):
        if self.k_max < 0:
            raise ModelError("k_max must be nonnegative")
        if not callable(self.size_pmf):
            vec = tuple(float(p) for p in self.size_pmf)
            if len(vec) != self.k_max + 1:
                raise ModelError(f"size_pmf needs {self.k_max + 1} entries")
            object.__setattr__(self, "size_pmf", vec)

    @classmethod
    def fixed(cls, k: int) -> InteractionLaw:
        return cls(tuple(1.0 if j == k else 0.0 for j in range(k + 1)), k)

    @property
    def profile_dependent(self) -> bool:
        return callable(self.size_pmf)

    def pmf(self, m: PopulationProfile | None = None) -> np.ndarray:
        if callable(self.size_pmf):
            vec = np.asarray(self.size_pmf(m), dtype=float)
        else:
            vec = np.asarray(self.size_pmf, dtype=float)
        if vec.shape != (self.k_max + 1,):
            raise ModelError(f"size_pmf returned {vec.shape}, expected ({self.k_max + 1},)")
        return vec


@dataclass(frozen=True)
class TransitionKernel:
    """Joint law of the participants' next internal states.

    ``joint_law(k, types, states, actions, m)`` returns a mapping from the tuple
    of next internal states to its probability.  ``m`` is ``None`` when the
    kernel is declared profile-independent.
    """

    joint_law: Callable[..., Mapping[tuple, float]]
    profile_dependent: bool = False
    lipschitz: float | None = None

    def __call__(self, k, types, states, actions, m=None) -> Mapping[tuple, float]:
        return self.joint_law(k, types, states, actions, m if self.profile_dependent else None)


@dataclass(frozen=True)
class GainFunction:
    """``gain(x, a, x_next, others_x, others_a, others_next)`` with ``|gain| <= bound``."""

    gain: Callable[..., float]
    bound: float

    def __call__(self, *args) -> float:
        return self.gain(*args)


@dataclass(frozen=True)
class SpontaneousLaw:
    """Per-player jumps that happen outside contests (e.g. regeneration).

    ``rates(theta, s)`` maps next internal states to rates per unit of time.  In
    the finite system each slot makes ``draws`` independent attempts; an attempt
    picks a uniform player and moves it with probability ``rate / draws``.
    """

    rates: Callable[[int, Label], Mapping[Label, float]]

    def draws(self, space: StateSpace) -> int:
        top = max((sum(v for s2, v in self.rates(theta, s).items() if s2 != s)
                   for theta, s in space.states()), default=0.0)
        return max(1, math.ceil(top - 1e-12))


@dataclass(frozen=True)
class ModelSpec:
    space: StateSpace
    interaction: InteractionLaw
    kernel: TransitionKernel
    gain: GainFunction
    discount: float
    spontaneous: SpontaneousLaw | None = None
    name: str = ""
    meta: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.discount > 0:
            raise ModelError("discount must be positive")

    def uniform_profile(self) -> PopulationProfile:
        return PopulationProfile(self.space, np.full(self.space.size, 1.0 / self.space.size))


@dataclass
class ValidationReport:
    failures: list[str]

    @property
    def ok(self) -> bool:
        return not self.failures

    def __bool__(self) -> bool:
        return self.ok


def _sample_profiles(space: StateSpace, rng: np.random.Generator, n: int) -> list[PopulationProfile]:
    out = [PopulationProfile(space, np.eye(space.size)[i]) for i in range(space.size)]
    out.append(PopulationProfile(space, np.full(space.size, 1.0 / space.size)))
    for w in rng.dirichlet(np.ones(space.size), size=n):
        out.append(PopulationProfile(space, w / w.sum()))
    return out


def iter_events(space: StateSpace, k: int, limit: int | None = None):
    """Yield every ``(flat state indices, actions)`` for an ordered ``k``-tuple."""
    count = 0
    for idx in itertools.product(range(space.size), repeat=k):
        for acts in itertools.product(*(space.actions[i] or (None,) for i in idx)):
            yield idx, acts
            count += 1
            if limit is not None and count >= limit:
                return


def validate_model(spec: ModelSpec, samples: int = 20, seed: int = 0,
                   max_events: int = 200_000) -> ValidationReport:
    """Check pmf normalization, kernel outputs, gain bound and Lipschitz sampling."""
    failures: list[str] = []
    space = spec.space
    rng = np.random.default_rng(seed)
    profiles = _sample_profiles(space, rng, samples)
    law = spec.interaction
    active_k = set()
    for m in profiles:
        try:
            pmf = law.pmf(m)
        except ModelError as exc:
            failures.append(str(exc))
            break
        if np.any(pmf < -1e-12):
            failures.append("size_pmf has negative entries")
            break
        if abs(pmf.sum() - 1.0) > 1e-9:
            failures.append(f"size_pmf not normalized (sum={pmf.sum():.6g})")
            break
        if not pmf @ np.arange(law.k_max + 1) > 0:
            failures.append("mean interaction size is zero")
            break
        active_k.update(int(k) for k in np.nonzero(pmf > 0)[0] if k > 0)

    kernel_profiles = profiles if spec.kernel.profile_dependent else [None]
    bound = spec.gain.bound
    worst_gain = 0.0
    for k in sorted(active_k):
        for m in kernel_profiles[:3] if spec.kernel.profile_dependent else kernel_profiles:
            for idx, acts in iter_events(space, k, max_events):
                xs = [space.state_at(i) for i in idx]
                types = tuple(x[0] for x in xs)
                states = tuple(x[1] for x in xs)
                try:
                    dist = spec.kernel(k, types, states, acts, m)
                except Exception as exc:  # noqa: BLE001 - report, don't crash
                    failures.append(f"kernel raised {exc!r} for {xs}, {acts}")
                    return ValidationReport(failures)
                total = 0.0
                for nxt, p in dist.items():
                    if p < -1e-12:
                        failures.append(f"kernel has negative probability at {xs}, {acts}")
                    if len(nxt) != k or any(s not in space.internal_states for s in nxt):
                        failures.append(f"kernel outcome {nxt!r} invalid for {xs}")
                        continue
                    total += p
                    if p <= 0:
                        continue
                    nx = [(t, s) for t, s in zip(types, nxt)]
                    for i in range(k):
                        others = [j for j in range(k) if j != i]
                        g = spec.gain(xs[i], acts[i], nx[i],
                                      tuple(xs[j] for j in others),
                                      tuple(acts[j] for j in others),
                                      tuple(nx[j] for j in others))
                        worst_gain = max(worst_gain, abs(g))
                if abs(total - 1.0) > 1e-12:
                    failures.append(f"kernel output not normalized at {xs}, {acts} (sum={total!r})")
                    return ValidationReport(failures)
    if worst_gain > bound * (1 + 1e-12):
        failures.append(f"gain bound violated (|gain|={worst_gain:.6g} > C0={bound:.6g})")

    if spec.kernel.profile_dependent and spec.kernel.lipschitz is not None and active_k:
        lip = spec.kernel.lipschitz
        k = min(active_k)
        events = list(iter_events(space, k, 200))
        for m in profiles[-5:]:
            direction = rng.dirichlet(np.ones(space.size)) - m.mass
            for eps in (1e-3,):
                m2 = PopulationProfile(space, m.mass + eps * direction)
                dist_m = float(np.abs(direction).max()) * eps
                for idx, acts in events:
                    xs = [space.state_at(i) for i in idx]
                    types = tuple(x[0] for x in xs)
                    states = tuple(x[1] for x in xs)
                    d1 = spec.kernel(k, types, states, acts, m)
                    d2 = spec.kernel(k, types, states, acts, m2)
                    diff = max(abs(d1.get(o, 0.0) - d2.get(o, 0.0)) for o in set(d1) | set(d2))
                    if diff > lip * dist_m * 1.01 + 1e-12:
                        failures.append(
                            f"kernel Lipschitz check failed (ratio {diff / dist_m:.4g} > {lip})")
                        return ValidationReport(failures)

    if spec.spontaneous is not None:
        for theta, s in space.states():
            rates = spec.spontaneous.rates(theta, s)
            if any(v < 0 for v in rates.values()):
                failures.append(f"negative spontaneous rate at {(theta, s)}")
            if any(s2 not in space.internal_states for s2 in rates):
                failures.append(f"spontaneous target outside the state set at {(theta, s)}")
    return ValidationReport(failures)


def with_tagged_player(spec: ModelSpec, base_type: int = 1) -> ModelSpec:
    """Add a type-1 clone of ``base_type`` holding one distinguished player.

    Original type ``t`` becomes ``t + 1``.  Kernel, gain and interaction law see
    the original types, and the merged profile when they depend on it.
    """
    space = spec.space
    if not 1 <= base_type <= space.type_count:
        raise ModelError(f"unknown base type {base_type}")

    def base_of(theta: int) -> int:
        return base_type if theta == 1 else theta - 1

    ext_actions = {}
    for theta in range(1, space.type_count + 2):
        for s in space.internal_states:
            ext_actions[(theta, s)] = space.actions_at(base_of(theta), s)
    ext = StateSpace.build(space.type_count + 1, space.internal_states, ext_actions)
    S = space.n_internal

    def merge(m: PopulationProfile | None) -> PopulationProfile | None:
        if m is None:
            return None
        mass = m.mass.reshape(space.type_count + 1, S)
        base = mass[1:].copy()
        base[base_type - 1] += mass[0]
        return PopulationProfile(space, base.reshape(-1))

    law = spec.interaction
    if law.profile_dependent:
        interaction = InteractionLaw(lambda m: law.pmf(merge(m)), law.k_max)
    else:
        interaction = law

    kern = spec.kernel

    def joint_law(k, types, states, actions, m):
        return kern(k, tuple(base_of(t) for t in types), states, actions, merge(m))

    g = spec.gain

    def gain(x, a, xn, ox, oa, on):
        def bx(y):
            return base_of(y[0]), y[1]
        return g(bx(x), a, bx(xn), tuple(map(bx, ox)), oa, tuple(map(bx, on)))

    spont = None
    if spec.spontaneous is not None:
        rates = spec.spontaneous.rates
        spont = SpontaneousLaw(lambda theta, s: rates(base_of(theta), s))

    return ModelSpec(ext, interaction,
                     TransitionKernel(joint_law, kern.profile_dependent, kern.lipschitz),
                     GainFunction(gain, g.bound), spec.discount, spont,
                     name=f"{spec.name}+tagged" if spec.name else "tagged",
                     meta={**dict(spec.meta), "tagged_base_type": base_type})


def tagged_strategy(ext: ModelSpec, u1: StationaryStrategy, u2: StationaryStrategy,
                    base_type: int = 1) -> StationaryStrategy:
    """Strategy on a :func:`with_tagged_player` space: ``u1`` for type 1, ``u2`` elsewhere."""
    space = u2.space
    rows = []
    for theta, s in ext.space.states():
        if theta == 1:
            rows.append(u1.dist(base_type, s))
        else:
            rows.append(u2.dist(theta - 1, s))
    return StationaryStrategy(ext.space, tuple(rows))


CSV_HEADER = "t,theta,s,mass,N"


@dataclass
class Trajectory:
    """Profiles ``mass[i]`` at ``times[i]``; ``N`` is an int or ``"inf"`` for the limit."""

    space: StateSpace
    times: np.ndarray
    mass: np.ndarray
    N: Any = "inf"
    meta: dict = field(default_factory=dict)
    tagged_path: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.times)

    def profile(self, i: int = -1) -> PopulationProfile:
        return PopulationProfile(self.space, self.mass[i])

    def component(self, theta: int, s: Label) -> np.ndarray:
        return self.mass[:, self.space.index(theta, s)]

    def at(self, t) -> np.ndarray:
        """Linear interpolation between stored knots."""
        t = np.asarray(t, dtype=float)
        out = np.empty(t.shape + (self.space.size,))
        for j in range(self.space.size):
            out[..., j] = np.interp(t, self.times, self.mass[:, j])
        return out

    def csv_rows(self) -> list[str]:
        rows = []
        states = self.space.states()
        for t, row in zip(self.times, self.mass):
            for (theta, s), v in zip(states, row):
                rows.append(f"{float(t)!r},{theta},{s},{float(v)!r},{self.N}")
        return rows

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(CSV_HEADER + "\n")
            for line in self.csv_rows():
                fh.write(line + "\n")
