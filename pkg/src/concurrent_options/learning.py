"""SMDP Q-learning over (multi-)options and learning-curve statistics."""
from __future__ import annotations

import bisect
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .executor import RngStream, member_tables, run_tables
from .planning import SmdpTask

log = logging.getLogger(__name__)

EPISODE_CAP = 10**5


@dataclass
class LearnerConfig:
    """Q-learning hyperparameters.

    With ``visit_alpha`` the step size is ``1 / visits(s, o)`` and ``alpha``
    is ignored. With ``random_starts`` each episode begins in a uniformly
    drawn non-terminal state instead of the task's start.
    """

    alpha: float = 0.25
    epsilon: float = 0.1
    gamma: float = 0.9
    episodes: int = 20000
    trials: int = 20
    rule: str = "t2"
    seed: int = 0
    visit_alpha: bool = False
    random_starts: bool = False
    episode_cap: int = EPISODE_CAP

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.rule not in ("t1", "t2", "sequential"):
            raise ValueError(f"rule must be t1, t2 or sequential, got {self.rule!r}")
        if self.episodes < 1 or self.trials < 1:
            raise ValueError("episodes and trials must be positive")


def smdp_q_update(q, s, a, r, s_next, k, available_next, alpha, gamma, terminal=False):
    """``Q(s,a) += alpha * (r + gamma**k * max_b Q(s', b) - Q(s,a))``.

    ``r`` is the discounted return of the multi-option and ``k`` its
    duration. A terminal ``s_next`` bootstraps from 0. ``q`` may be an array
    or a list of rows; it is updated in place and returned.
    """
    if k < 1:
        raise ValueError("duration must be >= 1")
    if terminal:
        best = 0.0
    else:
        if len(available_next) == 0:
            raise ValueError(f"no available action at non-terminal state {s_next}")
        row = q[s_next]
        best = max(row[b] for b in available_next)
    row = q[s]
    row[a] += alpha * (r + gamma**k * best - row[a])
    return q


def select_epsilon_greedy(q, s, available, epsilon, rng: RngStream):
    """Uniform over ``available`` with probability ``epsilon``, else the
    greedy action (lowest index on ties)."""
    if len(available) == 0:
        raise ValueError(f"no available action in state {s}")
    if rng.uniform() < epsilon:
        return available[int(rng.uniform() * len(available))]
    row = q[s]
    best = available[0]
    best_v = row[best]
    for a in available[1:]:
        if row[a] > best_v or (row[a] == best_v and a < best):
            best, best_v = a, row[a]
    return best


def running_median(lengths) -> np.ndarray:
    """Element ``n`` is the median of ``lengths[:n+1]``; even counts average the middle pair."""
    values = list(lengths)
    if not values:
        raise ValueError("running median of an empty sequence")
    ordered: list = []
    out = np.empty(len(values))
    for n, x in enumerate(values):
        bisect.insort(ordered, x)
        mid = n // 2
        out[n] = ordered[mid] if n % 2 == 0 else (ordered[mid] + ordered[mid + 1]) / 2
    return out


@dataclass
class LearningCurve:
    steps: np.ndarray                 # (trials, episodes) primitive steps per episode
    running_median: np.ndarray        # (trials, episodes), per trial
    capped: np.ndarray = field(default=None)  # (trials, episodes) hit the episode cap

    @property
    def mean_running_median(self) -> np.ndarray:
        return self.running_median.mean(axis=0)

    def final_median(self, last: int = 1000) -> np.ndarray:
        """Per-trial median episode length over the last ``last`` episodes."""
        return np.median(self.steps[:, -last:], axis=1)


@dataclass
class TrainingResult:
    curve: LearningCurve
    q_tables: list[np.ndarray]


def train_trial(task: SmdpTask, config: LearnerConfig, trial: int):
    """One independent trial; returns ``(steps, capped, Q)``."""
    mdp = task.mdp
    if abs(mdp.discount - config.gamma) > 1e-15:
        raise ValueError(f"config gamma {config.gamma} differs from the MDP discount {mdp.discount}")
    rng = RngStream(config.seed, trial)
    uniform = rng.uniform
    n, n_actions = task.available.shape
    q = [[0.0] * n_actions for _ in range(n)]
    visits = [[0] * n_actions for _ in range(n)] if config.visit_alpha else None
    tables = [member_tables(mdp, mo) for mo in task.actions]
    rules = [mo.rule for mo in task.actions]
    mask = task.available
    terminal = mdp.terminal.tolist()
    avail_cache: dict[int, list[int]] = {}
    gamma, alpha, eps, cap = config.gamma, config.alpha, config.epsilon, config.episode_cap
    steps = np.zeros(config.episodes, dtype=np.int64)
    capped = np.zeros(config.episodes, dtype=bool)
    start = task.start
    live = np.flatnonzero(~mdp.terminal).tolist()

    def available(s):
        acts = avail_cache.get(s)
        if acts is None:
            acts = np.flatnonzero(mask[s]).tolist()
            if not acts and not terminal[s]:
                raise ValueError(f"no available action at non-terminal state {s}")
            avail_cache[s] = acts
        return acts

    for ep in range(config.episodes):
        s = live[int(uniform() * len(live))] if config.random_starts else start
        total = 0
        while not terminal[s]:
            acts = available(s)
            a = select_epsilon_greedy(q, s, acts, eps, rng)
            s_next, k, ret, _ = run_tables(tables[a], s, rules[a], uniform, gamma)
            if visits is not None:
                visits[s][a] += 1
                step = 1.0 / visits[s][a]
            else:
                step = alpha
            done = terminal[s_next]
            smdp_q_update(q, s, a, ret, s_next, k, None if done else available(s_next), step, gamma, done)
            total += k
            s = s_next
            if total >= cap:
                capped[ep] = True
                break
        steps[ep] = min(total, cap)
    return steps, capped, np.array(q)


def _train_trial_star(args):
    return train_trial(*args)


def run_training(task: SmdpTask, config: LearnerConfig, workers: int = 1) -> TrainingResult:
    """Independent trials of SMDP Q-learning from ``task.start``.

    Trial ``i`` draws from ``RngStream(config.seed, i)``, so results do not
    depend on ``workers``.
    """
    jobs = [(task, config, i) for i in range(config.trials)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_train_trial_star, jobs))
    else:
        results = [train_trial(*job) for job in jobs]
    steps = np.vstack([r[0] for r in results])
    capped = np.vstack([r[1] for r in results])
    if capped.any():
        log.warning("%d episodes hit the %d-step cap", int(capped.sum()), config.episode_cap)
    medians = np.vstack([running_median(row) for row in steps])
    return TrainingResult(LearningCurve(steps, medians, capped), [r[2] for r in results])


def _fmt(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def write_learning_csv(curve: LearningCurve, fh) -> None:
    """``trial,episode,steps,running_median`` rows; trials from 0, episodes from 1."""
    fh.write("trial,episode,steps,running_median\n")
    for t in range(curve.steps.shape[0]):
        for e in range(curve.steps.shape[1]):
            fh.write(f"{t},{e + 1},{int(curve.steps[t, e])},{_fmt(curve.running_median[t, e])}\n")
