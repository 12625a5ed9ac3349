"""Sampled execution of options and multi-options on a flat MDP.

This is the ground-truth process used by learning and the Monte-Carlo
oracle that the analytic models are checked against. Within a step, every
running member draws a primitive from its policy at the pre-step state and
moves its own variable block; termination is then sampled for each running
member at the new state.
"""
from __future__ import annotations

import math
import weakref
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .concurrent import MultiOption, multi_option_model
from .core_mdp import FlatMdp
from .options import MarkovOption, check_option

STEP_CAP = 10**6


class ImproperOptionError(RuntimeError):
    """An execution exceeded its step cap."""


class RngStream:
    """Reproducible uniform stream keyed by ``(seed, stream_id)``."""

    _BLOCK = 4096

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        self._gen = np.random.Generator(np.random.PCG64(ss))
        self._buf: list[float] = []
        self._pos = 0

    def uniform(self) -> float:
        if self._pos >= len(self._buf):
            self._buf = self._gen.random(self._BLOCK).tolist()
            self._pos = 0
        u = self._buf[self._pos]
        self._pos += 1
        return u


@dataclass
class RunOutcome:
    end_state: int
    duration: int
    discounted_reward: float
    per_member_end_times: dict[str, int]


_TABLES: "weakref.WeakKeyDictionary[FlatMdp, dict]" = weakref.WeakKeyDictionary()


def member_tables(mdp: FlatMdp, mo: MultiOption) -> list:
    return [_member_table(mdp, o) for o in mo.members]


def _member_table(mdp: FlatMdp, option: MarkovOption):
    """(per-action sampling tables, cumulative policy rows, beta list) for one option."""
    cache = _TABLES.setdefault(mdp, {})
    hit = cache.get(id(option))
    if hit is not None and hit[0] is option:
        return hit[1]
    check_option(mdp, option)
    tables = mdp.sampling_tables
    acts = [tables[a] for a in option.actions]
    cum = np.cumsum(option.policy, axis=1)
    beta = np.maximum(option.termination, mdp.terminal.astype(float))
    entry = (acts, cum.tolist(), beta.tolist())
    cache[id(option)] = (option, entry)
    return entry


def _sample_step(s: int, members: list, uniform) -> tuple[int, float]:
    delta = 0
    reward = 0.0
    for acts, pcum, _ in members:
        row = pcum[s]
        u = uniform()
        j, last = 0, len(row) - 1
        while j < last and u >= row[j]:
            j += 1
        indptr, succ, cum, rew = acts[j]
        i, hi = indptr[s], indptr[s + 1] - 1
        u = uniform()
        while i < hi and u >= cum[i]:
            i += 1
        delta += succ[i] - s
        reward += rew[i]
    return s + delta, reward / len(members)


def step_joint(mdp: FlatMdp, members, s: int, rng: RngStream, frozen=()) -> tuple[int, float]:
    """One primitive step of every non-frozen member from state ``s``.

    Returns the next state ordinal and the step reward (mean of the running
    members' primitive rewards).
    """
    frozen = set(frozen)
    active = [_member_table(mdp, o) for o in members if o.name not in frozen]
    if not active:
        raise ValueError("no running member")
    return _sample_step(s, active, rng.uniform)


def _run(mdp: FlatMdp, members, s: int, rule: str, uniform, step_cap: int):
    tables = [_member_table(mdp, o) for o in members]
    return run_tables(tables, s, rule, uniform, mdp.discount, step_cap)


def run_tables(tables: list, s: int, rule: str, uniform, gamma: float, step_cap: int = STEP_CAP):
    """Core rollout loop over prefetched member tables.

    Returns ``(end state, duration, discounted return, member end times)``.
    """
    running = list(range(len(tables)))
    end_times = [0] * len(tables)
    disc = 1.0
    ret = 0.0
    t = 0
    while True:
        if t >= step_cap:
            raise ImproperOptionError(f"no termination after {step_cap} steps")
        s, r = _sample_step(s, [tables[i] for i in running], uniform)
        t += 1
        ret += disc * r
        disc *= gamma
        still = []
        for i in running:
            if uniform() < tables[i][2][s]:
                end_times[i] = t
            else:
                still.append(i)
        if rule == "t1" and len(still) < len(running):
            for i in still:
                end_times[i] = t
            return s, t, ret, end_times
        running = still
        if not running:
            return s, t, ret, end_times


def run_multi_option(
    mdp: FlatMdp, mo: MultiOption, s: int, rng: RngStream, rule: str | None = None, step_cap: int = STEP_CAP
) -> RunOutcome:
    """Execute ``mo`` from ``s`` until it terminates under ``rule`` (default ``mo.rule``).

    Under ``t1`` the first termination interrupts the other members (their
    end time is the interruption time); under ``t2`` finished members are
    frozen until all have terminated.
    """
    rule = rule or mo.rule
    if rule not in ("t1", "t2"):
        raise ValueError(f"unknown rule {rule!r}")
    if not mo.available(s):
        raise ValueError(f"{mo.name} not available in state {s}")
    end, k, ret, times = _run(mdp, mo.members, s, rule, rng.uniform, step_cap)
    return RunOutcome(end, k, ret, {o.name: t for o, t in zip(mo.members, times)})


def run_sequential_option(mdp: FlatMdp, option: MarkovOption, s: int, rng: RngStream, step_cap: int = STEP_CAP) -> RunOutcome:
    """Execute one option alone; variables it does not control stay frozen."""
    return run_multi_option(mdp, MultiOption((option,)), s, rng, step_cap=step_cap)


@dataclass
class MonteCarloModel:
    """Empirical duration/next-state frequencies and discounted return."""

    n: int
    counts: Counter
    mean_return: float
    stderr_return: float

    def frequency(self, s_next: int, k: int) -> float:
        return self.counts.get((s_next, k), 0) / self.n

    def stderr(self, s_next: int, k: int) -> float:
        p = self.frequency(s_next, k)
        return math.sqrt(p * (1.0 - p) / self.n)

    def durations(self) -> Counter:
        out: Counter = Counter()
        for (_, k), c in self.counts.items():
            out[k] += c
        return out


def monte_carlo_model(mdp: FlatMdp, mo: MultiOption, s: int, n: int, rng: RngStream, rule: str | None = None) -> MonteCarloModel:
    """Estimate ``P(s, ., .)`` and ``R(s)`` from ``n`` independent rollouts."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rule = rule or mo.rule
    if not mo.available(s):
        raise ValueError(f"{mo.name} not available in state {s}")
    counts: Counter = Counter()
    total = 0.0
    total_sq = 0.0
    uniform = rng.uniform
    for _ in range(n):
        end, k, ret, _ = _run(mdp, mo.members, s, rule, uniform, STEP_CAP)
        counts[(end, k)] += 1
        total += ret
        total_sq += ret * ret
    mean = total / n
    var = max(total_sq / n - mean * mean, 0.0) * n / max(n - 1, 1)
    return MonteCarloModel(n, counts, mean, math.sqrt(var / n))


@dataclass
class VerificationRow:
    s_next: int
    k: int
    analytic: float
    empirical: float
    stderr: float
    z: float


@dataclass
class VerificationReport:
    rows: list[VerificationRow]
    reward_analytic: float
    reward_empirical: float
    reward_stderr: float
    reward_z: float
    z_max: float

    @property
    def failures(self) -> list[VerificationRow]:
        return [r for r in self.rows if abs(r.z) > self.z_max]

    @property
    def reward_ok(self) -> bool:
        return abs(self.reward_z) <= self.z_max

    @property
    def passed(self) -> bool:
        return not self.failures and self.reward_ok

    def lines(self) -> list[str]:
        out = ["s' k analytic empirical stderr z"]
        for r in self.rows:
            out.append(f"{r.s_next} {r.k} {r.analytic:.6g} {r.empirical:.6g} {r.stderr:.3g} {r.z:+.2f}")
        out.append(
            f"reward {self.reward_analytic:.6g} {self.reward_empirical:.6g} {self.reward_stderr:.3g} {self.reward_z:+.2f}"
        )
        return out


def compare_with_model(table: np.ndarray, reward: float, mc: MonteCarloModel, min_expected: float = 20.0, z_max: float = 3.0) -> VerificationReport:
    """Compare an analytic ``(K, N)`` table ``P(s, s', k)`` (row ``k-1``) with Monte-Carlo counts.

    Cells with at least ``min_expected`` expected hits are tested with the
    binomial standard error of the analytic probability. The return is
    tested against the empirical standard error.
    """
    rows = []
    ks, cols = np.nonzero(table * mc.n >= min_expected)
    for k0, sn in zip(ks.tolist(), cols.tolist()):
        p = float(table[k0, sn])
        se = math.sqrt(p * (1.0 - p) / mc.n)
        emp = mc.frequency(sn, k0 + 1)
        z = (emp - p) / se if se > 0 else (0.0 if emp == p else math.inf)
        rows.append(VerificationRow(sn, k0 + 1, p, emp, se, z))
    # cells the analytic model rules out must never be hit
    for (sn, k), c in mc.counts.items():
        if k > table.shape[0] or table[k - 1, sn] == 0.0:
            rows.append(VerificationRow(sn, k, 0.0, c / mc.n, 0.0, math.inf))
    rows.sort(key=lambda r: (r.s_next, r.k))
    se_r = mc.stderr_return
    diff = mc.mean_return - reward
    rz = diff / se_r if se_r > 0 else (0.0 if abs(diff) < 1e-9 else math.inf)
    return VerificationReport(rows, reward, mc.mean_return, se_r, rz, z_max)


def verify_multi_option(
    mdp: FlatMdp,
    mo: MultiOption,
    s: int,
    n: int,
    rng: RngStream,
    k_max: int = 200,
    min_expected: float = 20.0,
    z_max: float = 3.0,
    model=None,
) -> VerificationReport:
    """Analytic model of ``mo`` at ``s`` against ``n`` sampled executions.

    ``model`` may supply a prebuilt analytic model (e.g. one built from a
    deliberately altered option); by default it is computed here.
    """
    if model is None:
        model = multi_option_model(mdp, mo, k_max=k_max, starts=[s])
    table = model.duration_table(s)
    mc = monte_carlo_model(mdp, mo, s, n, rng)
    return compare_with_model(table, float(model.reward[s]), mc, min_expected, z_max)
