"""Factored flat MDPs.

A state is an assignment of value indices to named finite-domain variables.
States are numbered densely in lexicographic order (first variable most
significant), and every primitive action carries a sparse ``N x N`` kernel.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

MAX_STATES = 10**7

FactoredState = tuple


@dataclass(frozen=True)
class StateVariable:
    name: str
    domain_size: int

    def __post_init__(self):
        if self.domain_size < 1:
            raise ValueError(f"variable {self.name!r} needs domain_size >= 1")


class StateSpace:
    """Dense ordinal numbering of the cross product of state variables."""

    def __init__(self, variables: Sequence[StateVariable], max_states: int = MAX_STATES):
        names = [v.name for v in variables]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate variable names in {names}")
        self.variables = tuple(variables)
        self.names = tuple(names)
        self.sizes = np.array([v.domain_size for v in variables], dtype=np.int64)
        n = 1
        for size in self.sizes:
            n *= int(size)
            if n > max_states:
                raise OverflowError(
                    f"state space exceeds {max_states} states; too large for tabular methods"
                )
        self.n_states = n
        strides = np.ones(len(variables), dtype=np.int64)
        for i in range(len(variables) - 2, -1, -1):
            strides[i] = strides[i + 1] * self.sizes[i + 1]
        self.strides = strides
        self._index = {name: i for i, name in enumerate(names)}

    def __len__(self):
        return self.n_states

    def index_of(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown state variable {name!r}") from None

    def indices(self, names: Iterable[str]) -> list[int]:
        """Positions of ``names`` in declared variable order."""
        return sorted(self.index_of(n) for n in names)

    def ordinal(self, state: Sequence[int]) -> int:
        if len(state) != len(self.sizes):
            raise ValueError(f"state {state!r} has {len(state)} values, expected {len(self.sizes)}")
        for value, size, name in zip(state, self.sizes, self.names):
            if not 0 <= value < size:
                raise ValueError(f"value {value} out of range for variable {name!r}")
        return int(np.dot(np.asarray(state, dtype=np.int64), self.strides))

    def state(self, ordinal: int) -> FactoredState:
        if not 0 <= ordinal < self.n_states:
            raise IndexError(f"ordinal {ordinal} out of range")
        return tuple(int(v) for v in (ordinal // self.strides) % self.sizes)

    def decode(self, ordinals) -> np.ndarray:
        """Vectorized ``state``: returns an ``(n, n_vars)`` array of value indices."""
        ordinals = np.asarray(ordinals, dtype=np.int64)
        return (ordinals[..., None] // self.strides) % self.sizes

    def encode(self, values) -> np.ndarray:
        return np.asarray(values, dtype=np.int64) @ self.strides

    @cached_property
    def table(self) -> np.ndarray:
        """Decoded values of every state, shape ``(N, n_vars)``."""
        return self.decode(np.arange(self.n_states))


def enumerate_states(space: StateSpace) -> list[FactoredState]:
    """All states in ordinal (lexicographic) order."""
    return [tuple(int(v) for v in row) for row in space.table]


def project(space: StateSpace, state: Sequence[int], names: Iterable[str]) -> tuple:
    """Values of ``state`` restricted to ``names``, in declared variable order."""
    if len(state) != len(space.names):
        raise ValueError("state length does not match the state space")
    return tuple(state[i] for i in space.indices(names))


def compose(space: StateSpace, parts: Sequence[tuple[Iterable[str], Sequence[int]]]) -> FactoredState:
    """Concatenate sub-state vectors over a disjoint cover of the variables.

    Each part is ``(variable names, values)`` with values listed in declared
    variable order of those names.
    """
    values: list[int | None] = [None] * len(space.names)
    for names, sub in parts:
        idx = space.indices(names)
        if len(idx) != len(sub):
            raise ValueError(f"part over {sorted(names)} has {len(sub)} values, expected {len(idx)}")
        for i, v in zip(idx, sub):
            if values[i] is not None:
                raise ValueError(f"variable {space.names[i]!r} covered by more than one part")
            values[i] = int(v)
    missing = [space.names[i] for i, v in enumerate(values) if v is None]
    if missing:
        raise ValueError(f"parts do not cover variables {missing}")
    return tuple(values)


@dataclass(eq=False)
class FlatMdp:
    """Primitive-action MDP over a factored state space.

    Attributes:
        space: state numbering.
        transitions: action name -> CSR matrix ``P[s, s']``.
        rewards: action name -> CSR matrix ``r[s, s']`` on the same sparsity
            pattern as the transition matrix.
        discount: gamma in (0, 1].
        scopes: action name -> variables the action may change. Defaults to
            every variable.
        terminal: boolean mask of episode-ending states. Every option is
            forced to terminate on entering one.
    """

    space: StateSpace
    transitions: Mapping[str, sp.csr_matrix]
    rewards: Mapping[str, sp.csr_matrix]
    discount: float
    scopes: Mapping[str, frozenset] = field(default_factory=dict)
    terminal: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 < self.discount <= 1.0:
            raise ValueError(f"discount must be in (0, 1], got {self.discount}")
        n = self.space.n_states
        self.transitions = {a: sp.csr_matrix(m) for a, m in self.transitions.items()}
        self.rewards = {a: sp.csr_matrix(m) for a, m in self.rewards.items()}
        for a, m in self.transitions.items():
            if m.shape != (n, n):
                raise ValueError(f"transition matrix of {a!r} has shape {m.shape}, expected {(n, n)}")
            m.sort_indices()
            if a not in self.rewards:
                raise ValueError(f"no reward matrix for action {a!r}")
        self.scopes = {
            a: frozenset(self.scopes.get(a, self.space.names)) for a in self.transitions
        }
        if self.terminal is None:
            self.terminal = np.zeros(n, dtype=bool)
        self.terminal = np.asarray(self.terminal, dtype=bool)

    @property
    def actions(self) -> tuple[str, ...]:
        return tuple(self.transitions)

    @property
    def variables(self) -> tuple[StateVariable, ...]:
        return self.space.variables

    @property
    def n_states(self) -> int:
        return self.space.n_states

    @cached_property
    def expected_rewards(self) -> dict[str, np.ndarray]:
        """``sum_s' P(s'|s,a) r(s,a,s')`` per action."""
        out = {}
        for a, p in self.transitions.items():
            r = self.rewards[a]
            out[a] = np.asarray(p.multiply(r).sum(axis=1)).ravel()
        return out

    @cached_property
    def sampling_tables(self) -> dict[str, tuple[list, list, list, list]]:
        """Per action: CSR row pointers, successors, cumulative probabilities
        and rewards as Python lists, for fast scalar sampling."""
        tables = {}
        for a, p in self.transitions.items():
            cum = _row_cumsum(p)
            rew = _aligned_values(p, self.rewards[a])
            tables[a] = (p.indptr.tolist(), p.indices.tolist(), cum.tolist(), rew.tolist())
        return tables

    def __getstate__(self):
        state = self.__dict__.copy()
        state.pop("sampling_tables", None)
        state.pop("expected_rewards", None)
        return state


def _row_cumsum(m: sp.csr_matrix) -> np.ndarray:
    total = np.concatenate([[0.0], np.cumsum(m.data)])
    base = np.repeat(total[m.indptr[:-1]], np.diff(m.indptr))
    return total[1:] - base


def _aligned_values(pattern: sp.csr_matrix, values: sp.csr_matrix) -> np.ndarray:
    """Entries of ``values`` at the stored positions of ``pattern`` (sorted CSR)."""
    rows = np.repeat(np.arange(pattern.shape[0]), np.diff(pattern.indptr))
    return np.asarray(values[rows, pattern.indices]).ravel()


def constant_rewards(transitions: Mapping[str, sp.spmatrix], value: float) -> dict[str, sp.csr_matrix]:
    """Reward matrices assigning ``value`` to every possible transition."""
    out = {}
    for a, p in transitions.items():
        r = sp.csr_matrix(p, copy=True)
        r.data[:] = value
        out[a] = r
    return out


@dataclass
class Violation:
    state: int
    action: str
    issue: str


def validate_mdp(mdp: FlatMdp, atol: float = 1e-9) -> list[Violation]:
    """Report every (state, action) row breaking the kernel invariants.

    Checks row sums, probability ranges and that each action only changes
    variables inside its declared scope. An empty list means the MDP is valid.
    """
    report = []
    space = mdp.space
    for a, p in mdp.transitions.items():
        sums = np.asarray(p.sum(axis=1)).ravel()
        for s in np.flatnonzero(np.abs(sums - 1.0) > atol):
            report.append(Violation(int(s), a, f"row sums to {sums[s]:.12g}"))
        rows = np.repeat(np.arange(p.shape[0]), np.diff(p.indptr))
        bad = (p.data < 0) | (p.data > 1)
        for s in np.unique(rows[bad]):
            report.append(Violation(int(s), a, "probability outside [0, 1]"))
        outside = [i for i, n in enumerate(space.names) if n not in mdp.scopes[a]]
        if outside and p.nnz:
            changed = (space.decode(rows)[:, outside] != space.decode(p.indices)[:, outside]) & (p.data > 0)[:, None]
            for s in np.unique(rows[changed.any(axis=1)]):
                names = [space.names[outside[j]] for j in np.flatnonzero(changed[rows == s].any(axis=0))]
                report.append(Violation(int(s), a, f"changes {names} outside the action scope"))
    return report
