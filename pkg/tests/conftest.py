from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from mfmdeg import hawkdove as hd
from mfmdeg.model import (
    GainFunction,
    InteractionLaw,
    ModelSpec,
    StateSpace,
    StationaryStrategy,
    TransitionKernel,
)

# first calls compile drift tables and generated code
settings.register_profile("mfmdeg", deadline=None)
settings.load_profile("mfmdeg")


def constant_model(k: int = 1, c0: float = 1.0, beta: float = 1.0) -> ModelSpec:
    """One state, one action, every participant collects ``c0``."""
    space = StateSpace.build(1, ("s",), ("a",))
    kernel = TransitionKernel(lambda k_, types, states, actions, m: {tuple(states): 1.0})
    gain = GainFunction(lambda *a: c0, abs(c0))
    return ModelSpec(space, InteractionLaw.fixed(k), kernel, gain, beta, name="constant")


def two_state_model(lam: float, mu: float, r1: float = 1.0, r2: float = 0.0,
                    beta: float = 1.0) -> ModelSpec:
    """Solo events: 1 -> 2 with probability ``lam``, 2 -> 1 with probability ``mu``."""
    space = StateSpace.build(1, (1, 2), ("a",))

    def law(k, types, states, actions, m):
        s = states[0]
        if s == 1:
            return {(2,): lam, (1,): 1 - lam}
        return {(1,): mu, (2,): 1 - mu}

    def gain(x, a, xn, ox, oa, on):
        return r1 if x[1] == 1 else r2

    return ModelSpec(space, InteractionLaw.fixed(1), TransitionKernel(law),
                     GainFunction(gain, max(abs(r1), abs(r2))), beta, name="two-state")


def rotation_model() -> ModelSpec:
    """Rock-paper-scissors imitation: the loser of a pair copies the winner."""
    space = StateSpace.build(1, (0, 1, 2), ("a",))

    def law(k, types, states, actions, m):
        x, y = states
        if (y - x) % 3 == 1:
            return {(y, y): 1.0}
        if (x - y) % 3 == 1:
            return {(x, x): 1.0}
        return {(x, y): 1.0}

    return ModelSpec(space, InteractionLaw.fixed(2), TransitionKernel(law),
                     GainFunction(lambda *a: 0.0, 0.0), 1.0, name="rotation")


def two_state_strategy(spec: ModelSpec) -> StationaryStrategy:
    return StationaryStrategy.uniform(spec.space)


@pytest.fixture
def hd2():
    return hd.build_model(v_bar=1.0, c=0.6)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
