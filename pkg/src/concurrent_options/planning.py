"""Bellman evaluation and synchronous value iteration over (multi-)options.

Models already fold the duration into the discounted kernel
``P(s, s') = sum_k P(s, s', k) gamma^k``, so every backup is
``R(s) + P(s, .) @ V``. Terminal states get a single zero-reward absorbing
action so the optimality equation needs no special case.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .concurrent import MultiOption, multi_option_model
from .core_mdp import FlatMdp
from .options import DEFAULT_K_MAX, DEFAULT_TOL

log = logging.getLogger(__name__)

ABSORB = "absorb"
MAX_ITER = 10**5


class NotConvergedError(RuntimeError):
    pass


@dataclass(eq=False)
class SmdpTask:
    """An MDP, an action set of multi-options and a fixed start state."""

    mdp: FlatMdp
    actions: list[MultiOption]
    start: int

    @cached_property
    def available(self) -> np.ndarray:
        """``(N, n_actions)`` mask; terminal states have no multi-option."""
        mask = np.column_stack([mo.initiation for mo in self.actions])
        mask[self.mdp.terminal] = False
        return mask

    @property
    def names(self) -> list[str]:
        return [mo.name for mo in self.actions]


@dataclass
class SmdpModels:
    """Per-action rewards and discounted kernels over all states.

    Column ``n_actions - 1`` is the absorbing action available only at
    terminal states.
    """

    names: list[str]
    rewards: np.ndarray            # (n_actions, N)
    kernels: list[sp.csr_matrix]   # N x N each
    available: np.ndarray          # (N, n_actions) bool
    terminal: np.ndarray
    residual: np.ndarray = field(default_factory=lambda: np.zeros(0))  # max truncation residual per action

    @property
    def n_states(self) -> int:
        return self.available.shape[0]

    @property
    def n_actions(self) -> int:
        return len(self.names)

    def backup(self, v: np.ndarray) -> np.ndarray:
        """``Q(s, a) = R(s, a) + sum_s' P(s, s' | a) V(s')``; ``-inf`` where unavailable."""
        q = np.full((self.n_states, self.n_actions), -np.inf)
        for a in range(self.n_actions):
            rows = self.available[:, a]
            vals = self.rewards[a] + self.kernels[a] @ v
            q[rows, a] = vals[rows]
        return q


def build_models(task: SmdpTask, k_max: int = DEFAULT_K_MAX, tol: float = DEFAULT_TOL) -> SmdpModels:
    """Analytic models of every action of ``task`` plus the absorbing action."""
    mdp = task.mdp
    n = mdp.n_states
    avail = task.available
    rewards, kernels, residual = [], [], []
    for a, mo in enumerate(task.actions):
        starts = np.flatnonzero(avail[:, a])
        model = multi_option_model(mdp, mo, k_max=k_max, tol=tol, starts=starts, keep_steps=False)
        rewards.append(model.reward)
        kernels.append(model.kernel)
        residual.append(model.residual.max() if n else 0.0)
        log.debug("model %s (%s): residual %.3g", mo.name, mo.rule, residual[-1])
    term = mdp.terminal
    rewards.append(np.zeros(n))
    kernels.append(sp.diags(mdp.discount * term.astype(float)).tocsr())
    residual.append(0.0)
    available = np.column_stack([avail, term])
    return SmdpModels(task.names + [ABSORB], np.vstack(rewards), kernels, available, term, np.array(residual))


def _check_available(models: SmdpModels):
    empty = ~models.available.any(axis=1)
    if empty.any():
        raise ValueError(f"states without any available action: {np.flatnonzero(empty)[:10].tolist()}")


def bellman_residual(models: SmdpModels, v: np.ndarray) -> float:
    """``max_s |max_a Q(s, a) - V(s)|`` for the backup of ``v``."""
    return float(np.max(np.abs(models.backup(v).max(axis=1) - v)))


def svi(models: SmdpModels, tol: float = 1e-8, max_iter: int = MAX_ITER, v0=None):
    """Synchronous value iteration from ``V_0 = 0`` (or ``v0``).

    Stops when the sup-norm change is at most ``tol``; returns ``(V, Q)``
    with ``Q`` the backup of the returned ``V``.
    """
    _check_available(models)
    v = np.zeros(models.n_states) if v0 is None else np.asarray(v0, dtype=float).copy()
    for it in range(1, max_iter + 1):
        q = models.backup(v)
        v_new = q.max(axis=1)
        delta = np.max(np.abs(v_new - v))
        v = v_new
        if delta <= tol:
            log.debug("svi converged after %d sweeps", it)
            return v, models.backup(v)
    raise NotConvergedError(f"value iteration did not reach tol {tol} in {max_iter} sweeps")


def greedy_policy(q: np.ndarray) -> np.ndarray:
    """Argmax action per state; ties go to the lowest action index."""
    q = np.asarray(q)
    finite = np.isfinite(q)
    if not finite.any(axis=1).all():
        raise ValueError("some states have no available action")
    return np.argmax(np.where(finite, q, -np.inf), axis=1)


def policy_matrix(actions: np.ndarray, n_actions: int) -> np.ndarray:
    """One-hot ``(N, n_actions)`` distribution for a deterministic policy."""
    mu = np.zeros((len(actions), n_actions))
    mu[np.arange(len(actions)), actions] = 1.0
    return mu


def evaluate_policy(models: SmdpModels, mu: np.ndarray, tol: float = 1e-8, max_iter: int = MAX_ITER):
    """Value of the stochastic policy ``mu`` (``(N, n_actions)``) by successive approximation.

    Returns ``(V, Q)`` where ``Q(s, a) = R(s, a) + P(s, . | a) V``.
    """
    mu = np.asarray(mu, dtype=float)
    if mu.ndim == 1:
        mu = policy_matrix(mu.astype(int), models.n_actions)
    if np.any(mu[~models.available] > 0):
        raise ValueError("policy puts mass on unavailable actions")
    if np.any(np.abs(mu.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("policy rows must sum to 1")
    used = np.flatnonzero(mu.any(axis=0))
    r = sum(mu[:, a] * models.rewards[a] for a in used)
    p = sum(sp.diags(mu[:, a]) @ models.kernels[a] for a in used).tocsr()
    v = np.zeros(models.n_states)
    for _ in range(max_iter):
        v_new = r + p @ v
        delta = np.max(np.abs(v_new - v))
        v = v_new
        if delta <= tol:
            return v, models.backup(v)
    raise NotConvergedError(f"policy evaluation did not reach tol {tol} in {max_iter} sweeps")
