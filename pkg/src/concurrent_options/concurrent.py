"""Multi-options: concurrent execution of coherent Markov options.

Options are grouped into coherence classes and a multi-option takes one
member per class. Members step together; the joint one-step kernel is the
product of the members' kernels, each acting on its own controlled block.
Two termination rules are supported:

``t1``
    the multi-option stops as soon as any member terminates; the others are
    interrupted.
``t2``
    the multi-option stops when every member has terminated; members that
    finish early are frozen while the rest keep running.

:func:`multi_option_model` builds the model by forward propagation over
"which members are still running". :func:`k_step_xi`, :func:`p_multi_t1`
and :func:`p_multi_t2` evaluate the defining recurrences directly for one
``(s, s', k)`` and are used to cross-check it.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .core_mdp import FlatMdp, compose, project
from .options import (
    DEFAULT_K_MAX,
    DEFAULT_TOL,
    MarkovOption,
    OptionModel,
    _resolve_starts,
    _scale_columns,
    _start_matrix,
    discount_steps,
    is_available,
    option_dynamics,
    truncation_report,
)

RULES = ("t1", "t2")


def check_coherent(a: MarkovOption, b: MarkovOption) -> bool:
    """True iff both options are partially factored and control disjoint variables."""
    if not a.controlled_vars or not b.controlled_vars:
        return False
    return not (a.controlled_vars & b.controlled_vars)


@dataclass
class CoherencePartition:
    """Disjoint option classes; options from different classes are coherent.

    ``overrides`` lists same-class pairs that are coherent anyway and were
    grouped by declaration (e.g. options whose initiation sets never overlap).
    """

    classes: tuple[tuple[MarkovOption, ...], ...]
    overrides: list[tuple[str, str]] = field(default_factory=list)

    @property
    def options(self) -> list[MarkovOption]:
        return [o for c in self.classes for o in c]

    def class_of(self, option: MarkovOption) -> int:
        for i, c in enumerate(self.classes):
            if any(o is option for o in c):
                return i
        raise KeyError(option.name)


def build_partition(options: Sequence[MarkovOption], declared: Sequence[Sequence[str]] | None = None) -> CoherencePartition:
    """Validate a declared class grouping, or derive one.

    Without ``declared``, options sharing a controlled variable (directly or
    transitively) end up in the same class. With it, every option must be
    listed exactly once and every cross-class pair must be coherent.
    """
    by_name = {o.name: o for o in options}
    if len(by_name) != len(options):
        raise ValueError("option names must be unique")
    if declared is None:
        parent = list(range(len(options)))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for i, j in itertools.combinations(range(len(options)), 2):
            if options[i].controlled_vars & options[j].controlled_vars:
                parent[find(i)] = find(j)
        groups: dict[int, list[str]] = {}
        for i, o in enumerate(options):
            groups.setdefault(find(i), []).append(o.name)
        declared = list(groups.values())

    seen: set[str] = set()
    classes = []
    for group in declared:
        members = []
        for name in group:
            if name not in by_name:
                raise ValueError(f"unknown option {name!r} in declared classes")
            if name in seen:
                raise ValueError(f"option {name!r} declared in more than one class")
            seen.add(name)
            members.append(by_name[name])
        classes.append(tuple(members))
    missing = set(by_name) - seen
    if missing:
        raise ValueError(f"options {sorted(missing)} not assigned to a class")

    for ci, cj in itertools.combinations(range(len(classes)), 2):
        for a in classes[ci]:
            for b in classes[cj]:
                if not check_coherent(a, b):
                    raise ValueError(
                        f"options {a.name!r} and {b.name!r} are in different classes but not coherent"
                    )
    overrides = [
        (a.name, b.name)
        for c in classes
        for a, b in itertools.combinations(c, 2)
        if check_coherent(a, b)
    ]
    return CoherencePartition(tuple(classes), overrides)


@dataclass(frozen=True, eq=False)
class MultiOption:
    """One option per class, executed concurrently under ``rule``."""

    members: tuple[MarkovOption, ...]
    rule: str = "t2"

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"unknown termination rule {self.rule!r}")
        if not self.members:
            raise ValueError("a multi-option needs at least one member")
        for a, b in itertools.combinations(self.members, 2):
            if a.controlled_vars & b.controlled_vars:
                raise ValueError(f"members {a.name!r} and {b.name!r} control shared variables")

    @property
    def name(self) -> str:
        return "+".join(o.name for o in self.members)

    def __repr__(self):
        return f"MultiOption({self.name!r}, {self.rule!r})"

    def available(self, s: int) -> bool:
        return all(is_available(o, s) for o in self.members)

    @property
    def initiation(self) -> np.ndarray:
        mask = self.members[0].initiation.copy()
        for o in self.members[1:]:
            mask &= o.initiation
        return mask


def all_multi_options(partition: CoherencePartition, rule: str) -> list[MultiOption]:
    """Every tuple in the product of the classes, in class order."""
    return [MultiOption(tuple(c), rule) for c in itertools.product(*partition.classes)]


def enumerate_multi_options(partition: CoherencePartition, s: int, rule: str = "t2") -> list[MultiOption]:
    """Multi-options whose members are all available in state ordinal ``s``."""
    avail = [[o for o in c if is_available(o, s)] for c in partition.classes]
    return [MultiOption(tuple(c), rule) for c in itertools.product(*avail)]


# ---------------------------------------------------------------------------
# joint one-step dynamics


def _product_kernel(a: sp.csr_matrix, b: sp.csr_matrix) -> sp.csr_matrix:
    """Joint step of two kernels acting on disjoint variable blocks.

    Row ``s`` of each kernel only moves its own block, so the joint successor
    ordinal is ``c_a + c_b - s``.
    """
    n = a.shape[0]
    rows_a = np.repeat(np.arange(n), np.diff(a.indptr))
    reps = np.diff(b.indptr)[rows_a]
    total = int(reps.sum())
    ia = np.repeat(np.arange(a.nnz), reps)
    offsets = np.arange(total) - np.repeat(np.cumsum(reps) - reps, reps)
    ib = np.repeat(b.indptr[rows_a], reps) + offsets
    rows = rows_a[ia]
    cols = a.indices[ia] + b.indices[ib] - rows
    vals = a.data[ia] * b.data[ib]
    out = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    out.sort_indices()
    return out


@dataclass
class _Joint:
    kernel: sp.csr_matrix
    survive: np.ndarray
    reward: np.ndarray


class _MultiDynamics:
    """One-step quantities for every subset of running members."""

    def __init__(self, mdp: FlatMdp, mo: MultiOption):
        self.mdp = mdp
        self.dyn = [option_dynamics(mdp, o) for o in mo.members]
        self.m = len(mo.members)
        self._joint: dict[frozenset, _Joint] = {}
        self._split: dict[tuple, np.ndarray] = {}

    def joint(self, active: frozenset) -> _Joint:
        hit = self._joint.get(active)
        if hit is None:
            idx = sorted(active)
            kernel = self.dyn[idx[0]].kernel
            survive = 1.0 - self.dyn[idx[0]].beta
            reward = self.dyn[idx[0]].reward.copy()
            for i in idx[1:]:
                kernel = _product_kernel(kernel, self.dyn[i].kernel)
                survive = survive * (1.0 - self.dyn[i].beta)
                reward += self.dyn[i].reward
            hit = _Joint(kernel, survive, reward / len(idx))
            self._joint[active] = hit
        return hit

    def split(self, active: frozenset, ended: frozenset) -> np.ndarray:
        """Probability that exactly ``ended`` (within ``active``) terminate at each state."""
        key = (active, ended)
        w = self._split.get(key)
        if w is None:
            w = np.ones(self.mdp.n_states)
            for i in sorted(active):
                w = w * (self.dyn[i].beta if i in ended else 1.0 - self.dyn[i].beta)
            self._split[key] = w
        return w


def _nonempty_subsets(active: frozenset) -> Iterable[frozenset]:
    items = sorted(active)
    for r in range(1, len(items) + 1):
        for combo in itertools.combinations(items, r):
            yield frozenset(combo)


@dataclass
class MultiOptionModel(OptionModel):
    """Model of a multi-option under a termination rule."""

    rule: str = "t2"
    name: str = ""


def multi_option_model(
    mdp: FlatMdp,
    mo: MultiOption,
    k_max: int = DEFAULT_K_MAX,
    tol: float = DEFAULT_TOL,
    starts=None,
    keep_steps: bool = True,
) -> MultiOptionModel:
    """Step distributions, discounted kernel and reward of a multi-option.

    The running mass is tracked separately for each set of still-running
    members. Each step moves it through the joint kernel of that set, then
    splits it by which members terminate at the new state: under ``t1`` any
    termination ends the multi-option; under ``t2`` terminated members drop
    out and their variables stay frozen until the set is empty.

    The per-step reward is the average expected reward of the running
    members' primitives (a single scalar per time step).
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    n = mdp.n_states
    md = _MultiDynamics(mdp, mo)
    mask = _resolve_starts(n, mo.initiation, starts)
    full = frozenset(range(md.m))
    running = {full: _start_matrix(n, mask)}
    gamma = mdp.discount
    steps = []
    reward = np.zeros(n)
    disc = 1.0
    for _ in range(k_max):
        ended = sp.csr_matrix((n, n))
        nxt: dict[frozenset, sp.csr_matrix] = {}
        for active, x in running.items():
            j = md.joint(active)
            reward += disc * (x @ j.reward)
            y = x @ j.kernel
            if mo.rule == "t1":
                ended = ended + _scale_columns(y, 1.0 - j.survive)
            else:
                for done in _nonempty_subsets(active):
                    flow = _scale_columns(y, md.split(active, done))
                    rest = active - done
                    if rest:
                        nxt[rest] = nxt[rest] + flow if rest in nxt else flow
                    else:
                        ended = ended + flow
            stay = _scale_columns(y, j.survive)
            nxt[active] = nxt[active] + stay if active in nxt else stay
        disc *= gamma
        steps.append(sp.csr_matrix(ended))
        running = {a: x for a, x in nxt.items() if x.nnz}
        if not running:
            break
    residual = np.zeros(n)
    for x in running.values():
        residual += np.asarray(x.sum(axis=1)).ravel()
    kernel = discount_steps(steps, gamma)
    err, ok = truncation_report(residual, gamma, k_max, tol, f"{mo.name} ({mo.rule})")
    return MultiOptionModel(
        starts=mask,
        reward=reward,
        kernel=kernel,
        residual=residual,
        steps=steps if keep_steps else None,
        k_max=k_max,
        gamma=gamma,
        truncation_error=err,
        converged=ok,
        rule=mo.rule,
        name=mo.name,
    )


# ---------------------------------------------------------------------------
# single-query recurrences


def single_step_xi(mdp: FlatMdp, mo: MultiOption, s: int, s_next: int) -> float:
    """One-step probability ``s -> s_next`` with every member executing once.

    Product over members of each member's one-step probability of moving its
    controlled block from ``s`` to the block of ``s_next`` (other variables
    held at ``s``), times the indicator that variables no member controls are
    unchanged.
    """
    for a, b in itertools.combinations(mo.members, 2):
        if a.controlled_vars & b.controlled_vars:
            raise ValueError(f"members {a.name!r} and {b.name!r} control shared variables")
    space = mdp.space
    cur = space.state(s)
    nxt = space.state(s_next)
    covered = set().union(*(o.controlled_vars for o in mo.members))
    rest = [v for v in space.names if v not in covered]
    if project(space, cur, rest) != project(space, nxt, rest):
        return 0.0
    prob = 1.0
    for o in mo.members:
        omega = o.controlled_vars
        others = [v for v in space.names if v not in omega]
        target = compose(space, [(omega, project(space, nxt, omega)), (others, project(space, cur, others))])
        prob *= option_dynamics(mdp, o).kernel[s, space.ordinal(target)]
        if prob == 0.0:
            break
    return float(prob)


def _joint_row(md: _MultiDynamics, active: frozenset, s: int) -> np.ndarray:
    return md.joint(active).kernel.getrow(s).toarray().ravel()


def _xi_vectors(md: _MultiDynamics, active: frozenset, s: int, k: int) -> list[np.ndarray]:
    """``xi(s, ., i)`` for ``i = 1..k``: survive steps ``1..i-1``, sit at ``.`` after step ``i``."""
    j = md.joint(active)
    kt = j.kernel.T.tocsr()
    out = [_joint_row(md, active, s)]
    for _ in range(1, k):
        out.append(kt @ (out[-1] * j.survive))
    return out


def k_step_xi(mdp: FlatMdp, mo: MultiOption, s: int, s_next: int, k: int) -> float:
    """Probability of sitting at ``s_next`` after ``k`` steps with no member
    having terminated at steps ``1..k-1``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    md = _MultiDynamics(mdp, mo)
    return float(_xi_vectors(md, frozenset(range(md.m)), s, k)[-1][s_next])


def p_multi_t1(mdp: FlatMdp, mo: MultiOption, s: int, s_next: int, k: int) -> float:
    """First-termination probability: survive to step ``k`` at ``s_next`` and
    have at least one member terminate there."""
    md = _MultiDynamics(mdp, mo)
    full = frozenset(range(md.m))
    xi = _xi_vectors(md, full, s, k)[-1][s_next]
    return float(xi * (1.0 - md.joint(full).survive[s_next]))


class _T2Recursion:
    """Memoized all-terminated recurrence over first-termination events."""

    def __init__(self, md: _MultiDynamics):
        self.md = md
        self.n = md.mdp.n_states
        self._rows: dict = {}
        self._xi: dict = {}

    def xi(self, active: frozenset, s: int, i: int) -> np.ndarray:
        key = (active, s)
        vecs = self._xi.get(key)
        if vecs is None or len(vecs) < i:
            vecs = _xi_vectors(self.md, active, s, i)
            self._xi[key] = vecs
        return vecs[i - 1]

    def row(self, active: frozenset, s: int, k: int) -> np.ndarray:
        """``P^active(s, ., k)``; the empty set ends immediately (``k = 0``)."""
        if not active:
            out = np.zeros(self.n)
            if k == 0:
                out[s] = 1.0
            return out
        if k == 0:
            return np.zeros(self.n)
        key = (active, s, k)
        hit = self._rows.get(key)
        if hit is not None:
            return hit
        md = self.md
        out = np.zeros(self.n)
        for i in range(1, k + 1):
            xi = self.xi(active, s, i)
            for done in _nonempty_subsets(active):
                rest = active - done
                if rest and i == k:
                    continue
                if not rest and i != k:
                    continue
                weighted = xi * md.split(active, done)
                if not rest:
                    out += weighted
                    continue
                for su in np.flatnonzero(weighted):
                    out += weighted[su] * self.row(rest, int(su), k - i)
        self._rows[key] = out
        return out


def p_multi_t2(mdp: FlatMdp, mo: MultiOption, s: int, s_next: int, k: int) -> float:
    """All-terminated probability ``P(s, s_next, k)`` by first-termination recursion.

    Sums over the step ``i`` at which the first (nonempty) group of members
    terminates, the group itself and the state where it happens, then
    recurses on the remaining members with the finished ones frozen.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rec = _T2Recursion(_MultiDynamics(mdp, mo))
    return float(rec.row(frozenset(range(len(mo.members))), s, k)[s_next])


def t2_step_rows(mdp: FlatMdp, mo: MultiOption, s: int, k_max: int) -> np.ndarray:
    """Dense ``(k_max, N)`` table of the recursive T2 distribution from ``s``."""
    rec = _T2Recursion(_MultiDynamics(mdp, mo))
    full = frozenset(range(len(mo.members)))
    return np.vstack([rec.row(full, s, k) for k in range(1, k_max + 1)])


# ---------------------------------------------------------------------------
# dump format


def write_model_dump(model: OptionModel, fh, name: str, rule: str, starts=None) -> int:
    """Write ``s s' k probability`` lines sorted by ``(s, s', k)``.

    Returns the number of data lines written.
    """
    if model.steps is None:
        raise ValueError("model built without step distributions")
    idx_parts, val_parts = [np.zeros((0, 3), dtype=np.int64)], [np.zeros(0)]
    for k, m in enumerate(model.steps, start=1):
        coo = m.tocoo()
        keep = coo.data != 0
        idx_parts.append(np.column_stack([coo.row[keep], coo.col[keep], np.full(keep.sum(), k)]).astype(np.int64))
        val_parts.append(coo.data[keep])
    idx = np.vstack(idx_parts)
    vals = np.concatenate(val_parts)
    if starts is not None:
        sel = np.isin(idx[:, 0], np.asarray(starts))
        idx, vals = idx[sel], vals[sel]
    order = np.lexsort((idx[:, 2], idx[:, 1], idx[:, 0]))
    fh.write(f"# multi_option={name} rule={rule} gamma={model.gamma!r} k_max={model.k_max}\n")
    fh.write("# s s_next k probability\n")
    for (a, b, k), p in zip(idx[order].tolist(), vals[order].tolist()):
        fh.write(f"{a} {b} {k} {p!r}\n")
    return len(vals)


def read_model_dump(fh) -> tuple[dict, np.ndarray, np.ndarray]:
    """Parse a dump; returns ``(header fields, int (n,3) array, probabilities)``."""
    header: dict[str, str] = {}
    idx, vals = [], []
    for line in fh:
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for tok in line[1:].split():
                if "=" in tok:
                    key, value = tok.split("=", 1)
                    header[key] = value
            continue
        a, b, k, p = line.split()
        idx.append((int(a), int(b), int(k)))
        vals.append(float(p))
    return header, np.array(idx, dtype=np.int64).reshape(-1, 3), np.array(vals)
