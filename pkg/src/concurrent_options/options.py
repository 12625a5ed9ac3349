"""Markov options and their analytic models.

An option is tabulated over the ordinal state space: an initiation mask, a
stationary policy over its own primitive actions and a termination
probability per state. Its model is computed by propagating the survival
mass through the option's one-step kernel, splitting off the terminating
part after each step.
"""
from __future__ import annotations

import warnings
import weakref
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .core_mdp import FlatMdp

DEFAULT_K_MAX = 200
DEFAULT_TOL = 1e-9


class TruncationWarning(RuntimeWarning):
    """Raised when the truncated model misses ``tol`` at the horizon."""


@dataclass(eq=False)
class MarkovOption:
    """Option ``<I, pi, beta>`` with a controlled/observed variable split.

    ``policy[s, j]`` is the probability of primitive ``actions[j]`` at state
    ordinal ``s``. ``controlled_vars`` are the variables only this option
    changes; ``observed_vars`` are read but evolved by other processes.
    """

    name: str
    actions: tuple[str, ...]
    initiation: np.ndarray
    policy: np.ndarray
    termination: np.ndarray
    controlled_vars: frozenset = field(default_factory=frozenset)
    observed_vars: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        self.actions = tuple(self.actions)
        self.initiation = np.asarray(self.initiation, dtype=bool)
        self.policy = np.asarray(self.policy, dtype=float)
        self.termination = np.asarray(self.termination, dtype=float)
        self.controlled_vars = frozenset(self.controlled_vars)
        self.observed_vars = frozenset(self.observed_vars)
        if self.policy.ndim != 2 or self.policy.shape[1] != len(self.actions):
            raise ValueError(f"{self.name}: policy must have one column per action")
        if self.controlled_vars & self.observed_vars:
            raise ValueError(f"{self.name}: controlled and observed variables overlap")
        if np.any((self.termination < 0) | (self.termination > 1)):
            raise ValueError(f"{self.name}: termination probabilities outside [0, 1]")

    def __repr__(self):
        return f"MarkovOption({self.name!r})"

    @property
    def scope(self) -> frozenset:
        return self.controlled_vars | self.observed_vars

    @classmethod
    def from_functions(
        cls,
        mdp: FlatMdp,
        name: str,
        actions: Sequence[str],
        initiation: Callable[[tuple], bool],
        policy: Callable[[tuple], dict | str],
        termination: Callable[[tuple], float],
        controlled_vars=(),
        observed_vars=(),
    ) -> "MarkovOption":
        """Tabulate an option from predicates over factored states.

        ``policy`` returns either an action name or a mapping action -> prob.
        """
        actions = tuple(actions)
        col = {a: j for j, a in enumerate(actions)}
        n = mdp.n_states
        init = np.zeros(n, dtype=bool)
        pol = np.zeros((n, len(actions)))
        beta = np.zeros(n)
        for s, values in enumerate(mdp.space.table.tolist()):
            values = tuple(values)
            init[s] = initiation(values)
            choice = policy(values)
            if isinstance(choice, str):
                pol[s, col[choice]] = 1.0
            else:
                for a, p in choice.items():
                    pol[s, col[a]] = p
            beta[s] = termination(values)
        return cls(name, actions, init, pol, beta, controlled_vars, observed_vars)


def is_available(option: MarkovOption, s: int) -> bool:
    """Whether ``option`` may be initiated in state ordinal ``s``."""
    return bool(option.initiation[s])


def check_option(mdp: FlatMdp, option: MarkovOption) -> None:
    """Raise ``ValueError`` if ``option`` cannot run on ``mdp``.

    Every primitive the option uses must only change variables the option
    controls; this is what makes joint steps of coherent options factor.
    """
    problems = []
    for a in option.actions:
        if a not in mdp.transitions:
            problems.append(f"unknown primitive action {a!r}")
        elif not mdp.scopes[a] <= option.controlled_vars:
            extra = sorted(mdp.scopes[a] - option.controlled_vars)
            problems.append(f"action {a!r} changes uncontrolled variables {extra}")
    unknown = (option.scope) - set(mdp.space.names)
    if unknown:
        problems.append(f"unknown variables {sorted(unknown)}")
    n = mdp.n_states
    if option.initiation.shape != (n,) or option.termination.shape != (n,) or option.policy.shape[0] != n:
        problems.append("tables do not match the number of states")
    else:
        sums = option.policy.sum(axis=1)
        bad = option.initiation & (np.abs(sums - 1.0) > 1e-9)
        if bad.any():
            problems.append(f"policy rows do not sum to 1 at {np.flatnonzero(bad)[:5].tolist()}")
    if problems:
        raise ValueError(f"option {option.name}: " + "; ".join(problems))


@dataclass(frozen=True)
class OptionDynamics:
    """One-step quantities of an option on a given MDP."""

    kernel: sp.csr_matrix      # sum_a pi(s,a) P(s'|s,a)
    beta: np.ndarray           # effective termination, forced to 1 at terminal states
    reward: np.ndarray         # expected one-step reward under pi


_DYNAMICS: "weakref.WeakKeyDictionary[FlatMdp, dict]" = weakref.WeakKeyDictionary()


def option_dynamics(mdp: FlatMdp, option: MarkovOption) -> OptionDynamics:
    """Cached one-step kernel, termination and reward of ``option``."""
    cache = _DYNAMICS.setdefault(mdp, {})
    key = id(option)
    hit = cache.get(key)
    if hit is not None and hit[0] is option:
        return hit[1]
    check_option(mdp, option)
    n = mdp.n_states
    kernel = sp.csr_matrix((n, n))
    reward = np.zeros(n)
    for j, a in enumerate(option.actions):
        w = option.policy[:, j]
        if not w.any():
            continue
        kernel = kernel + sp.diags(w) @ mdp.transitions[a]
        reward += w * mdp.expected_rewards[a]
    kernel = sp.csr_matrix(kernel)
    kernel.eliminate_zeros()
    kernel.sort_indices()
    beta = np.maximum(option.termination, mdp.terminal.astype(float))
    dyn = OptionDynamics(kernel, beta, reward)
    cache[key] = (option, dyn)
    return dyn


def _start_matrix(n: int, starts: np.ndarray) -> sp.csr_matrix:
    rows = np.flatnonzero(starts)
    return sp.csr_matrix((np.ones(len(rows)), (rows, rows)), shape=(n, n))


def _scale_columns(m: sp.csr_matrix, w: np.ndarray) -> sp.csr_matrix:
    out = m.copy()
    out.data *= w[out.indices]
    out.eliminate_zeros()
    return out


def _resolve_starts(n: int, option_mask: np.ndarray, starts) -> np.ndarray:
    if starts is None:
        return option_mask.copy()
    mask = np.zeros(n, dtype=bool)
    mask[np.asarray(starts, dtype=np.int64)] = True
    return mask


def option_step_distribution(
    mdp: FlatMdp,
    option: MarkovOption,
    k_max: int = DEFAULT_K_MAX,
    starts=None,
    order: str = "k",
) -> tuple[list[sp.csr_matrix], np.ndarray]:
    """Termination distributions ``p(s, s', k)`` for ``k = 1..k_max``.

    Returns ``(steps, residual)``: ``steps[k-1][s, s']`` is the probability
    that the option started in ``s`` terminates in ``s'`` after exactly ``k``
    steps, and ``residual[s]`` the mass still running after ``k_max`` steps.
    Rows are indexed by state ordinal; only rows in ``starts`` (default: the
    initiation set) are filled.

    ``order="k"`` propagates all starts together one step at a time;
    ``order="s"`` runs each start to the horizon before the next one. Both
    give the same numbers and exist to cross-check each other.
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    n = mdp.n_states
    dyn = option_dynamics(mdp, option)
    mask = _resolve_starts(n, option.initiation, starts)
    if order == "k":
        steps, residual, _ = _propagate(dyn, _start_matrix(n, mask), k_max, mdp.discount)
        return steps, residual
    if order != "s":
        raise ValueError(f"unknown sweep order {order!r}")
    rows = {k: [] for k in range(k_max)}
    residual = np.zeros(n)
    stay = 1.0 - dyn.beta
    for s in np.flatnonzero(mask):
        x = np.zeros(n)
        x[s] = 1.0
        for k in range(k_max):
            y = dyn.kernel.T @ x
            rows[k].append((s, y * dyn.beta))
            x = y * stay
        residual[s] = x.sum()
    steps = []
    for k in range(k_max):
        m = sp.lil_matrix((n, n))
        for s, v in rows[k]:
            nz = np.flatnonzero(v)
            m[s, nz] = v[nz]
        steps.append(sp.csr_matrix(m))
    return steps, residual


def _propagate(dyn: OptionDynamics, x: sp.csr_matrix, k_max: int, gamma: float):
    """Run the survival recurrence; returns steps, residual and reward."""
    n = x.shape[0]
    stay = 1.0 - dyn.beta
    steps = []
    reward = np.zeros(n)
    disc = 1.0
    for _ in range(k_max):
        reward += disc * (x @ dyn.reward)
        disc *= gamma
        y = x @ dyn.kernel
        steps.append(_scale_columns(y, dyn.beta))
        x = _scale_columns(y, stay)
        if x.nnz == 0:
            break
    residual = np.asarray(x.sum(axis=1)).ravel()
    return steps, residual, reward


@dataclass
class OptionModel:
    """Discounted reward/transition model of an option.

    ``steps`` (optional) holds ``p(s, s', k)`` for ``k = 1..len(steps)``;
    later durations have zero probability up to ``residual``.
    """

    starts: np.ndarray
    reward: np.ndarray
    kernel: sp.csr_matrix
    residual: np.ndarray
    steps: list | None
    k_max: int
    gamma: float
    truncation_error: float
    converged: bool

    def step(self, k: int) -> sp.csr_matrix:
        n = self.kernel.shape[0]
        if self.steps is None:
            raise ValueError("model built without step distributions")
        if 1 <= k <= len(self.steps):
            return self.steps[k - 1]
        return sp.csr_matrix((n, n))

    def duration_table(self, s: int) -> np.ndarray:
        """Dense ``(K, N)`` array of ``p(s, s', k)`` for one start ``s``."""
        if self.steps is None:
            raise ValueError("model built without step distributions")
        return np.vstack([m.getrow(s).toarray().ravel() for m in self.steps]) if self.steps else np.zeros((0, self.kernel.shape[0]))


def discount_steps(steps: list, gamma: float) -> sp.csr_matrix:
    """``sum_k gamma**k * steps[k-1]``."""
    total = None
    disc = gamma
    for m in steps:
        total = m * disc if total is None else total + m * disc
        disc *= gamma
    return sp.csr_matrix(total)


def truncation_report(residual: np.ndarray, gamma: float, k_max: int, tol: float, what: str):
    err = float(gamma**k_max * residual.max()) if residual.size else 0.0
    ok = err <= tol
    if not ok:
        warnings.warn(
            f"{what}: truncation error {err:.3g} exceeds tol {tol:.3g} at k_max={k_max}",
            TruncationWarning,
            stacklevel=3,
        )
    return err, ok


def option_discounted_model(
    mdp: FlatMdp,
    option: MarkovOption,
    k_max: int = DEFAULT_K_MAX,
    tol: float = DEFAULT_TOL,
    starts=None,
    keep_steps: bool = True,
) -> OptionModel:
    """Expected discounted reward ``r(s)`` and kernel ``p(s, s') = sum_k p(s,s',k) gamma^k``.

    Reward accrues on every executed primitive step, the terminating one
    included. The truncation error ``gamma**k_max * max residual`` is
    recorded; exceeding ``tol`` emits a :class:`TruncationWarning`.
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    n = mdp.n_states
    dyn = option_dynamics(mdp, option)
    mask = _resolve_starts(n, option.initiation, starts)
    steps, residual, reward = _propagate(dyn, _start_matrix(n, mask), k_max, mdp.discount)
    kernel = discount_steps(steps, mdp.discount)
    err, ok = truncation_report(residual, mdp.discount, k_max, tol, option.name)
    return OptionModel(
        starts=mask,
        reward=reward,
        kernel=kernel,
        residual=residual,
        steps=steps if keep_steps else None,
        k_max=k_max,
        gamma=mdp.discount,
        truncation_error=err,
        converged=ok,
    )
