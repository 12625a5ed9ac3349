import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from concurrent_options.concurrent import MultiOption
from concurrent_options.executor import RngStream, run_multi_option
from concurrent_options.learning import (
    LearnerConfig,
    LearningCurve,
    run_training,
    running_median,
    select_epsilon_greedy,
    smdp_q_update,
    train_trial,
    write_learning_csv,
)
from concurrent_options.planning import SmdpTask, build_models, svi
from toys import make_mdp, option


def test_update_example():
    q = np.zeros((2, 1))
    smdp_q_update(q, 0, 0, -1.9, 1, 2, [0], alpha=0.5, gamma=0.9)
    assert q[0, 0] == pytest.approx(-0.95)


def test_update_alpha_zero_is_identity():
    q = np.array([[0.3, -2.0], [1.0, 4.0]])
    before = q.copy()
    smdp_q_update(q, 0, 1, -5.0, 1, 3, [0, 1], alpha=0.0, gamma=0.9)
    assert np.array_equal(q, before)


def test_update_bootstrap_rules():
    q = [[0.0, 0.0], [-3.0, -1.0]]
    smdp_q_update(q, 0, 0, -1.0, 1, 1, [0, 1], alpha=1.0, gamma=0.9)
    assert q[0][0] == pytest.approx(-1.0 + 0.9 * -1.0)
    smdp_q_update(q, 0, 1, -1.0, 1, 1, None, alpha=1.0, gamma=0.9, terminal=True)
    assert q[0][1] == -1.0
    with pytest.raises(ValueError):
        smdp_q_update(q, 0, 0, -1.0, 1, 1, [], alpha=1.0, gamma=0.9)
    with pytest.raises(ValueError):
        smdp_q_update(q, 0, 0, -1.0, 1, 0, [0], alpha=1.0, gamma=0.9)


def go_or_wait():
    """State 0 may step to the terminal state 1 or wait in place."""
    mdp = make_mdp({"s": 2}, {"go": np.eye(2)[[1, 1]], "wait": np.eye(2)}, {}, terminal=[False, True])
    go = option(mdp, "go", ("go",), [1.0], np.ones(2), {"s"})
    wait = option(mdp, "wait", ("wait",), [1.0], np.ones(2), {"s"})
    return SmdpTask(mdp, [MultiOption((go,)), MultiOption((wait,))], 0)


def test_replayed_updates_reach_fixed_point():
    task = go_or_wait()
    _, q_star = svi(build_models(task), tol=1e-12)
    q = np.zeros((2, 2))
    rng = RngStream(0, 0)
    for _ in range(2000):
        a = int(rng.uniform() * 2)
        out = run_multi_option(task.mdp, task.actions[a], 0, rng)
        done = bool(task.mdp.terminal[out.end_state])
        smdp_q_update(q, 0, a, out.discounted_reward, out.end_state, out.duration, [0, 1], 0.5, 0.9, done)
    assert np.abs(q[0] - q_star[0, :2]).max() <= 1e-3


def test_epsilon_one_is_uniform():
    q = [[5.0, 0.0, -1.0, 2.0, 3.0]]
    avail = [0, 1, 2, 3, 4]
    rng = RngStream(4, 0)
    n = 100_000
    counts = np.bincount([select_epsilon_greedy(q, 0, avail, 1.0, rng) for _ in range(n)], minlength=5)
    p = 1 / 5
    z = (counts - n * p) / np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(z) <= 4)
    chi2 = float(((counts - n * p) ** 2 / (n * p)).sum())
    assert chi2 < 18.47  # 0.999 quantile, 4 degrees of freedom


def test_epsilon_zero_greedy_and_ties():
    rng = RngStream(0, 0)
    assert select_epsilon_greedy([[1.0, 3.0, 2.0]], 0, [0, 1, 2], 0.0, rng) == 1
    assert select_epsilon_greedy([[1.0, 3.0, 3.0]], 0, [2, 1], 0.0, rng) == 1
    assert select_epsilon_greedy([[1.0, 3.0, 3.0]], 0, [0, 2], 0.0, rng) == 2
    for eps in (0.0, 0.5, 1.0):
        assert all(select_epsilon_greedy([[0.0, 9.0]], 0, [0], eps, rng) == 0 for _ in range(50))
    with pytest.raises(ValueError):
        select_epsilon_greedy([[0.0]], 0, [], 0.1, rng)


def test_running_median_examples():
    assert list(running_median([5])) == [5]
    assert list(running_median([3, 1, 2])) == [3, 2, 2]
    assert list(running_median([7, 7, 7, 7])) == [7, 7, 7, 7]
    assert list(running_median([1, 4])) == [1, 2.5]
    with pytest.raises(ValueError):
        running_median([])


@given(st.lists(st.integers(1, 500), min_size=1, max_size=60), st.randoms())
def test_running_median_definition(xs, rnd):
    med = running_median(xs)
    assert len(med) == len(xs)
    for n in range(len(xs)):
        assert med[n] == np.median(xs[: n + 1])
    prefix = xs[:]
    rnd.shuffle(prefix)
    assert running_median(prefix)[-1] == med[-1]


def test_config_ranges():
    for bad in ({"alpha": 0.0}, {"alpha": 1.5}, {"epsilon": -0.1}, {"gamma": 0.0}, {"rule": "t3"}, {"episodes": 0}):
        with pytest.raises(ValueError):
            LearnerConfig(**bad)
    with pytest.raises(ValueError, match="discount"):
        train_trial(go_or_wait(), LearnerConfig(gamma=0.5, episodes=1, trials=1), 0)


def test_pure_exploration_matches_executor(rooms):
    task = SmdpTask(rooms.mdp, rooms.actions("concurrent", "t2"), rooms.start)
    cfg = LearnerConfig(epsilon=1.0, episodes=1, trials=1, seed=21)
    steps, capped, _ = train_trial(task, cfg, 0)
    # replay the same stream: two selection draws, then the rollout's own draws
    rng = RngStream(21, 0)
    s, total = rooms.start, 0
    while not rooms.mdp.terminal[s]:
        avail = np.flatnonzero(task.available[s])
        assert rng.uniform() < 1.0
        a = int(avail[int(rng.uniform() * len(avail))])
        out = run_multi_option(rooms.mdp, task.actions[a], s, rng)
        s, total = out.end_state, total + out.duration
    assert steps[0] == total and not capped[0]


def test_training_outputs(rooms):
    task = SmdpTask(rooms.mdp, rooms.actions("concurrent", "t1"), rooms.start)
    cfg = LearnerConfig(episodes=60, trials=2, seed=3, rule="t1")
    result = run_training(task, cfg)
    curve = result.curve
    assert curve.steps.shape == curve.running_median.shape == (2, 60)
    assert curve.steps.min() >= 1
    assert curve.mean_running_median.shape == (60,)
    for q in result.q_tables:
        live = task.available
        assert np.all(q[live] <= 0.0) and np.all(q[live] >= -1 / (1 - 0.9) - 1e-9)
    again = run_training(task, cfg)
    assert np.array_equal(again.curve.steps, curve.steps)
    assert all(np.array_equal(a, b) for a, b in zip(again.q_tables, result.q_tables))


def test_parallel_trials_match_serial():
    task = go_or_wait()
    cfg = LearnerConfig(episodes=30, trials=3, seed=8)
    serial = run_training(task, cfg)
    parallel = run_training(task, cfg, workers=2)
    assert np.array_equal(serial.curve.steps, parallel.curve.steps)


def test_episode_cap_flagged():
    mdp = make_mdp({"s": 2}, {"wait": np.eye(2)}, {}, terminal=[False, True])
    wait = option(mdp, "wait", ("wait",), [1.0], np.ones(2), {"s"})
    task = SmdpTask(mdp, [MultiOption((wait,))], 0)
    result = run_training(task, LearnerConfig(episodes=2, trials=1, episode_cap=50))
    assert result.curve.capped.all()
    assert np.all(result.curve.steps == 50)


def test_random_starts_cover_states():
    task = go_or_wait()
    cfg = LearnerConfig(episodes=20, trials=1, random_starts=True, epsilon=1.0)
    steps, _, q = train_trial(task, cfg, 0)
    assert steps.min() >= 1
    assert np.all(q[1] == 0.0)


def test_csv_format():
    curve = LearningCurve(np.array([[3, 1, 2]]), running_median([3, 1, 2])[None, :])
    buf = io.StringIO(newline="")
    write_learning_csv(curve, buf)
    text = buf.getvalue()
    assert text == "trial,episode,steps,running_median\n0,1,3,3\n0,2,1,2\n0,3,2,2\n"
    half = LearningCurve(np.array([[1, 4]]), running_median([1, 4])[None, :])
    buf = io.StringIO()
    write_learning_csv(half, buf)
    assert buf.getvalue().splitlines()[-1] == "0,2,4,2.5"
