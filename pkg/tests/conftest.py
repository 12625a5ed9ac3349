"""Shared fixtures."""
import sys

import numpy as np
import pytest

from concurrent_options.core_mdp import StateSpace, StateVariable
from concurrent_options.rooms import build_rooms_domain
from toys import block_kernel, key_chain, make_mdp, option


@pytest.fixture(scope="session")
def rooms():
    return build_rooms_domain()


@pytest.fixture
def two_chains():
    """Two independent 4-state chains ``x`` and ``y`` with two actions each."""
    rng = np.random.default_rng(7)
    sizes = {"x": 4, "y": 4}
    space = StateSpace([StateVariable(k, v) for k, v in sizes.items()])
    local = {}
    kernels = {}
    for var in ("x", "y"):
        for j in range(2):
            m = rng.random((4, 4)) * (rng.random((4, 4)) < 0.6)
            m[np.arange(4), rng.integers(0, 4, 4)] += 0.5
            m /= m.sum(axis=1, keepdims=True)
            local[f"{var}{j}"] = m
            kernels[f"{var}{j}"] = block_kernel(space, var, m)
    scopes = {a: {a[0]} for a in kernels}
    mdp = make_mdp(sizes, kernels, scopes)
    pol_x = rng.dirichlet(np.ones(2), size=mdp.n_states)
    pol_y = rng.dirichlet(np.ones(2), size=mdp.n_states)
    beta_x = rng.uniform(0.1, 0.6, mdp.n_states)
    beta_y = rng.uniform(0.1, 0.6, mdp.n_states)
    ox = option(mdp, "ox", ("x0", "x1"), pol_x, beta_x, {"x"}, {"y"})
    oy = option(mdp, "oy", ("y0", "y1"), pol_y, beta_y, {"y"}, {"x"})
    return mdp, ox, oy, local


@pytest.fixture
def nav_key():
    """5-cell deterministic corridor next to the key process.

    ``walk`` moves right and ends at the last cell (4 steps from cell 0);
    ``pickup`` advances the key until it is held.
    """
    sizes = {"pos": 5, "key": 11}
    space = StateSpace([StateVariable(k, v) for k, v in sizes.items()])
    right = np.zeros((5, 5))
    for p in range(5):
        right[p, min(p + 1, 4)] = 1.0
    kernels = {"right": block_kernel(space, "pos", right), "get": block_kernel(space, "key", key_chain())}
    mdp = make_mdp(sizes, kernels, {"right": {"pos"}, "get": {"key"}})
    pos = space.table[:, 0]
    key = space.table[:, 1]
    walk = option(mdp, "walk", ("right",), [1.0], (pos == 4).astype(float), {"pos"}, {"key"}, init=pos < 4)
    pickup = option(mdp, "pickup", ("get",), [1.0], (key == 6).astype(float), {"key"}, init=key != 6)
    return mdp, walk, pickup


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
