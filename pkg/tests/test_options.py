import itertools
import warnings

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from concurrent_options.options import (
    TruncationWarning,
    check_option,
    discount_steps,
    is_available,
    option_discounted_model,
    option_step_distribution,
)
from toys import make_mdp, option


def corridor(slip_left=0.1):
    """Cells 0-1-2; ``right`` succeeds w.p. 0.9, else slips left (a wall keeps cell 0 in place)."""
    p = np.zeros((3, 3))
    for c in range(3):
        p[c, min(c + 1, 2)] += 0.9
        p[c, max(c - 1, 0)] += slip_left
    return p


def corridor_option():
    mdp = make_mdp({"cell": 3}, {"right": corridor()}, {"right": {"cell"}})
    beta = np.array([0.0, 0.0, 1.0])
    return mdp, option(mdp, "walk", ("right",), [1.0], beta, {"cell"}, init=[True, True, False])


def test_is_available():
    mdp, o = corridor_option()
    always = option(mdp, "any", ("right",), [1.0], np.ones(3), {"cell"})
    assert all(is_available(always, s) for s in range(3))
    assert is_available(o, 0) and not is_available(o, 2)


def test_key_option_availability(rooms):
    space = rooms.mdp.space
    held = space.ordinal((0, 0, 6))
    free = space.ordinal((0, 0, 0))
    assert not is_available(rooms.option("pickup_key"), held)
    assert is_available(rooms.option("pickup_key"), free)
    assert is_available(rooms.option("putback_key"), held)
    assert not is_available(rooms.option("putback_key"), free)


def test_single_step_option_is_one_step_kernel():
    rng = np.random.default_rng(0)
    k = {a: rng.dirichlet(np.ones(4), 4) for a in ("a", "b")}
    mdp = make_mdp({"s": 4}, k, {})
    pi = rng.dirichlet(np.ones(2), 4)
    o = option(mdp, "o", ("a", "b"), pi, np.ones(4), {"s"})
    steps, residual = option_step_distribution(mdp, o, k_max=5)
    expected = pi[:, [0]] * k["a"] + pi[:, [1]] * k["b"]
    assert np.allclose(steps[0].toarray(), expected, atol=1e-15)
    assert all(m.nnz == 0 for m in steps[1:])
    assert np.all(residual == 0)


def enumerate_first_passage(p, beta, start, k):
    """Brute force: probability of terminating at each cell after exactly ``k`` steps."""
    out = np.zeros(p.shape[0])
    for path in itertools.product(range(p.shape[0]), repeat=k):
        prob, cur = 1.0, start
        for j, nxt in enumerate(path):
            prob *= p[cur, nxt]
            prob *= beta[nxt] if j == k - 1 else 1.0 - beta[nxt]
            cur = nxt
        out[path[-1]] += prob
    return out


def test_corridor_two_step_probability():
    mdp, o = corridor_option()
    steps, _ = option_step_distribution(mdp, o, k_max=6)
    assert steps[1][0, 2] == pytest.approx(0.81, abs=1e-15)
    p, beta = corridor(), o.termination
    for k in range(1, 6):
        assert np.allclose(steps[k - 1].toarray()[0], enumerate_first_passage(p, beta, 0, k), atol=1e-15)


def test_residual_geometric_bound():
    rng = np.random.default_rng(3)
    mdp = make_mdp({"s": 5}, {"a": rng.dirichlet(np.ones(5), 5)}, {})
    beta = rng.uniform(0.2, 0.5, 5)
    o = option(mdp, "o", ("a",), [1.0], beta, {"s"})
    for k_max in (1, 3, 10, 30):
        _, residual = option_step_distribution(mdp, o, k_max=k_max)
        assert residual.max() <= (1 - beta.min()) ** k_max + 1e-15


def test_k_max_must_be_positive():
    mdp, o = corridor_option()
    with pytest.raises(ValueError):
        option_step_distribution(mdp, o, k_max=0)
    with pytest.raises(ValueError):
        option_discounted_model(mdp, o, k_max=0)


def test_single_step_reward_and_kernel():
    p = np.array([[0.3, 0.7], [0.5, 0.5]])
    mdp = make_mdp({"s": 2}, {"a": p}, {}, gamma=0.9)
    o = option(mdp, "o", ("a",), [1.0], np.ones(2), {"s"})
    m = option_discounted_model(mdp, o)
    assert np.allclose(m.reward, -1.0)
    assert np.allclose(m.kernel.toarray(), 0.9 * p, atol=1e-15)


def test_two_step_deterministic_reward():
    mdp = make_mdp({"s": 3}, {"a": np.eye(3)[[1, 2, 2]]}, {}, gamma=0.9)
    o = option(mdp, "o", ("a",), [1.0], [0.0, 0.0, 1.0], {"s"}, init=[True, False, False])
    m = option_discounted_model(mdp, o)
    assert m.reward[0] == pytest.approx(-1.9, abs=1e-15)
    assert m.kernel[0, 2] == pytest.approx(0.81, abs=1e-15)


def test_truncation_reported():
    mdp = make_mdp({"s": 2}, {"a": np.eye(2)}, {}, gamma=0.99)
    o = option(mdp, "stuck", ("a",), [1.0], [0.01, 0.01], {"s"})
    with pytest.warns(TruncationWarning):
        m = option_discounted_model(mdp, o, k_max=10, tol=1e-9)
    assert not m.converged
    assert m.truncation_error == pytest.approx(0.99**10 * 0.99**10)
    with warnings.catch_warnings():
        warnings.simplefilter("error", TruncationWarning)
        assert option_discounted_model(mdp, o, k_max=5000, tol=1e-9).converged


def test_check_option_rejects_out_of_scope_action():
    mdp = make_mdp({"x": 2, "y": 2}, {"a": np.eye(4)}, {"a": {"x", "y"}})
    o = option(mdp, "o", ("a",), [1.0], np.ones(4), {"x"}, {"y"})
    with pytest.raises(ValueError, match="uncontrolled"):
        check_option(mdp, o)
    bad = option(mdp, "bad", ("a",), np.zeros((4, 1)), np.ones(4), {"x", "y"})
    with pytest.raises(ValueError, match="sum to 1"):
        check_option(mdp, bad)


def test_overlapping_omega_phi_rejected():
    mdp = make_mdp({"x": 2}, {"a": np.eye(2)}, {})
    with pytest.raises(ValueError):
        option(mdp, "o", ("a",), [1.0], np.ones(2), {"x"}, {"x"})
    with pytest.raises(ValueError):
        option(mdp, "o", ("a",), [1.0], [1.5, 0.0], {"x"})


@st.composite
def random_option(draw):
    n = draw(st.integers(2, 6))
    n_act = draw(st.integers(1, 3))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    kernels = {}
    for a in range(n_act):
        m = rng.random((n, n)) * (rng.random((n, n)) < 0.5)
        m[np.arange(n), rng.integers(0, n, n)] += 0.1
        kernels[f"a{a}"] = m / m.sum(axis=1, keepdims=True)
    gamma = draw(st.sampled_from([0.5, 0.9, 0.99]))
    mdp = make_mdp({"s": n}, kernels, {}, gamma=gamma)
    beta = rng.uniform(0.05, 1.0, n) * (rng.random(n) < 0.8)
    beta[rng.integers(0, n)] = 1.0
    pi = rng.dirichlet(np.ones(n_act), n)
    return mdp, option(mdp, "o", tuple(kernels), pi, beta, {"s"})


@settings(max_examples=60, deadline=None)
@given(random_option())
def test_conservation(case):
    mdp, o = case
    steps, residual = option_step_distribution(mdp, o, k_max=60)
    total = sum(np.asarray(m.sum(axis=1)).ravel() for m in steps) + residual
    assert np.allclose(total, 1.0, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(random_option())
def test_discount_consistency(case):
    mdp, o = case
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TruncationWarning)
        m = option_discounted_model(mdp, o, k_max=80)
    rebuilt = sum(mdp.discount ** (k + 1) * s.toarray() for k, s in enumerate(m.steps))
    assert np.allclose(rebuilt, m.kernel.toarray(), atol=1e-12)
    assert np.allclose(discount_steps(m.steps, mdp.discount).toarray(), m.kernel.toarray(), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(random_option())
def test_sweep_orders_agree(case):
    mdp, o = case
    by_k, res_k = option_step_distribution(mdp, o, k_max=25, order="k")
    by_s, res_s = option_step_distribution(mdp, o, k_max=25, order="s")
    n = mdp.n_states
    by_k = by_k + [sp.csr_matrix((n, n))] * (25 - len(by_k))
    for a, b in zip(by_k, by_s):
        assert np.allclose(a.toarray(), b.toarray(), atol=1e-12, rtol=0)
    assert np.allclose(res_k, res_s, atol=1e-12)


def test_reward_matches_duration_law():
    # constant -1 reward: r(s) = sum_k -(1 - g^k)/(1 - g) Pr(k)
    rng = np.random.default_rng(11)
    mdp = make_mdp({"s": 4}, {"a": rng.dirichlet(np.ones(4), 4)}, {}, gamma=0.9)
    o = option(mdp, "o", ("a",), [1.0], [0.3, 0.5, 0.2, 1.0], {"s"})
    m = option_discounted_model(mdp, o, k_max=400)
    pk = np.array([np.asarray(s.sum(axis=1)).ravel() for s in m.steps])
    ks = np.arange(1, len(m.steps) + 1)[:, None]
    assert np.allclose(m.reward, (-(1 - 0.9**ks) / 0.1 * pk).sum(axis=0), atol=1e-12)
