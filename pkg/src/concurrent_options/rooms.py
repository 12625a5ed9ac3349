"""Four rooms with locked hallway doors and a key process.

State variables:

* ``position`` -- traversable cell index (row-major over the grid),
* ``doors_state`` -- one open/closed bit per hallway,
* ``key_state`` -- the 11-state key process; ``HOLDING`` (6) means the
  agent holds the key.

Navigation primitives move with probability 9/10 in the chosen direction
and 1/30 in each other direction; blocked moves keep the agent in place.
A hallway cell whose door is closed can only be entered while holding the
key. Entering a hallway opens its door and leaving it closes the door again.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .concurrent import CoherencePartition, MultiOption, all_multi_options, build_partition
from .core_mdp import FlatMdp, StateSpace, StateVariable, constant_rewards
from .options import MarkovOption

N_KEY_STATES = 11
HOLDING = 6
DROPPED = 7
DROP_PROB = 0.3
MOVE_PROB = 0.9
SLIP_PROB = 0.1 / 3
STEP_REWARD = -1.0

NAV_ACTIONS = ("up", "down", "left", "right")
MOVES = {"up": (-1, 0), "down": (1, 0), "left": (0, -1), "right": (0, 1)}
NAV_VARS = frozenset({"position", "doors_state"})
KEY_VARS = frozenset({"key_state"})

DEFAULT_LAYOUT = """\
#############
#S....#.....#
#.....#.....#
#.....1.....#
#.....#.....#
#.....#.....#
###0#####2###
#.....#.....#
#.....#.....#
#.....3.....#
#.....#.....#
#.....#.....#
#############
"""


@dataclass
class RoomsLayout:
    """Grid geometry parsed from ASCII (``#`` wall, ``.`` floor, ``0-3`` hallways, ``S`` start)."""

    grid: list[str]
    cells: list[tuple[int, int]]
    hallways: dict[int, tuple[int, int]]
    start: tuple[int, int]
    goal: int
    rooms: list[list[tuple[int, int]]] = field(default_factory=list)
    room_hallways: list[list[int]] = field(default_factory=list)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def cell_index(self, cell) -> int:
        return self._index[tuple(cell)]

    def __post_init__(self):
        self._index = {c: i for i, c in enumerate(self.cells)}

    def is_open(self, cell) -> bool:
        return tuple(cell) in self._index

    def hallway_at(self, cell) -> int | None:
        for h, c in self.hallways.items():
            if c == tuple(cell):
                return h
        return None


def parse_layout(text: str, goal: int = 3) -> RoomsLayout:
    grid = [line.rstrip("\n") for line in text.strip("\n").splitlines()]
    if not grid or len({len(r) for r in grid}) != 1:
        raise ValueError("layout must be a non-empty rectangle")
    cells, hallways, start = [], {}, None
    for r, row in enumerate(grid):
        for c, ch in enumerate(row):
            if ch == "#":
                continue
            if ch not in ".S0123":
                raise ValueError(f"unexpected character {ch!r} at {(r, c)}")
            if r in (0, len(grid) - 1) or c in (0, len(row) - 1):
                raise ValueError(f"open cell {(r, c)} on the border")
            cells.append((r, c))
            if ch == "S":
                start = (r, c)
            elif ch.isdigit():
                h = int(ch)
                if h in hallways:
                    raise ValueError(f"hallway {h} defined twice")
                hallways[h] = (r, c)
    if start is None:
        raise ValueError("layout has no start cell 'S'")
    if goal not in hallways:
        raise ValueError(f"goal hallway {goal} not in layout")

    hall_cells = set(hallways.values())
    floor = [c for c in cells if c not in hall_cells]
    seen: set = set()
    rooms = []
    for cell in floor:
        if cell in seen:
            continue
        comp, queue = [], deque([cell])
        seen.add(cell)
        while queue:
            cur = queue.popleft()
            comp.append(cur)
            for dr, dc in MOVES.values():
                nb = (cur[0] + dr, cur[1] + dc)
                if nb in seen or nb in hall_cells or grid[nb[0]][nb[1]] == "#":
                    continue
                seen.add(nb)
                queue.append(nb)
        rooms.append(sorted(comp))
    room_of = {c: i for i, room in enumerate(rooms) for c in room}
    room_hallways: list[list[int]] = [[] for _ in rooms]
    for h, (r, c) in sorted(hallways.items()):
        adjacent = {room_of[(r + dr, c + dc)] for dr, dc in MOVES.values() if (r + dr, c + dc) in room_of}
        if len(adjacent) != 2:
            raise ValueError(f"hallway {h} must connect exactly two rooms")
        for i in adjacent:
            room_hallways[i].append(h)
    return RoomsLayout(grid, cells, hallways, start, goal, rooms, room_hallways)


def load_layout(path, goal: int = 3) -> RoomsLayout:
    return parse_layout(Path(path).read_text(), goal=goal)


def default_layout() -> RoomsLayout:
    return parse_layout(DEFAULT_LAYOUT)


def _next_key(action: str, key: int) -> list[tuple[int, float]]:
    if action == "get_key":
        if key < HOLDING:
            return [(key + 1, 1.0)]
        if key == HOLDING:
            return [(key, 1.0)]
        return [((key + 1) % N_KEY_STATES, 1.0)]
    if action == "key_nop":
        if key == HOLDING:
            return [(HOLDING, 1.0 - DROP_PROB), (DROPPED, DROP_PROB)]
        return [(key, 1.0)]
    if action == "putback_key":
        return [(0, 1.0)] if key == HOLDING else [(key, 1.0)]
    raise KeyError(action)


def nav_outcomes(layout: RoomsLayout, pos: int, doors: int, holding: bool, action: str) -> dict[tuple[int, int], float]:
    """Distribution over ``(position, doors_state)`` after a navigation primitive."""
    if action == "room_nop":
        return {(pos, doors): 1.0}
    cell = layout.cells[pos]
    here = layout.hallway_at(cell)
    out: dict[tuple[int, int], float] = {}
    for direction, (dr, dc) in MOVES.items():
        prob = MOVE_PROB if direction == action else SLIP_PROB
        target = (cell[0] + dr, cell[1] + dc)
        new_pos, new_doors = pos, doors
        if layout.is_open(target):
            h = layout.hallway_at(target)
            if h is None or doors >> h & 1 or holding:
                new_pos = layout.cell_index(target)
                if here is not None:
                    new_doors &= ~(1 << here)
                if h is not None:
                    new_doors |= 1 << h
        key = (new_pos, new_doors)
        out[key] = out.get(key, 0.0) + prob
    return out


def build_rooms_mdp(layout: RoomsLayout | None = None, gamma: float = 0.9) -> FlatMdp:
    """Flat MDP with navigation, ``room_nop`` and key primitives; reward -1 per step."""
    layout = layout or default_layout()
    n_h = len(layout.hallways)
    space = StateSpace([
        StateVariable("position", layout.n_cells),
        StateVariable("doors_state", 2**n_h),
        StateVariable("key_state", N_KEY_STATES),
    ])
    n = space.n_states
    n_doors = 2**n_h

    def ordinal(p, d, k):
        return (p * n_doors + d) * N_KEY_STATES + k

    transitions = {}
    for action in NAV_ACTIONS + ("room_nop",):
        rows, cols, vals = [], [], []
        for p in range(layout.n_cells):
            for d in range(n_doors):
                dist = {h: nav_outcomes(layout, p, d, h, action) for h in (False, True)}
                for k in range(N_KEY_STATES):
                    s = ordinal(p, d, k)
                    for (p2, d2), prob in dist[k == HOLDING].items():
                        rows.append(s)
                        cols.append(ordinal(p2, d2, k))
                        vals.append(prob)
        transitions[action] = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    base = np.arange(n) - np.arange(n) % N_KEY_STATES
    key_of = np.arange(n) % N_KEY_STATES
    for action in ("get_key", "key_nop", "putback_key"):
        rows, cols, vals = [], [], []
        for k in range(N_KEY_STATES):
            for k2, prob in _next_key(action, k):
                sel = np.flatnonzero(key_of == k)
                rows.append(sel)
                cols.append(base[sel] + k2)
                vals.append(np.full(len(sel), prob))
        transitions[action] = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        )
    scopes = {a: NAV_VARS if a in NAV_ACTIONS + ("room_nop",) else KEY_VARS for a in transitions}
    goal_pos = layout.cell_index(layout.hallways[layout.goal])
    terminal = space.table[:, 0] == goal_pos
    return FlatMdp(space, transitions, constant_rewards(transitions, STEP_REWARD), gamma, scopes, terminal)


def _bfs_policy(layout: RoomsLayout, room: int, target: int) -> dict[int, str]:
    """Shortest-path action per cell index; ties broken in up/down/left/right order."""
    other = [h for h in layout.room_hallways[room] if h != target]
    region = set(layout.rooms[room]) | {layout.hallways[target]} | {layout.hallways[h] for h in other}
    goal = layout.hallways[target]
    dist = {goal: 0}
    queue = deque([goal])
    while queue:
        cur = queue.popleft()
        for dr, dc in MOVES.values():
            nb = (cur[0] + dr, cur[1] + dc)
            if nb in region and nb not in dist:
                dist[nb] = dist[cur] + 1
                queue.append(nb)
    unreachable = region - set(dist)
    if unreachable:
        raise ValueError(f"hallway {target} unreachable from {sorted(unreachable)}")
    policy = {}
    for cell, d in dist.items():
        if cell == goal:
            continue
        for action in NAV_ACTIONS:
            dr, dc = MOVES[action]
            nb = (cell[0] + dr, cell[1] + dc)
            if dist.get(nb) == d - 1:
                policy[layout.cell_index(cell)] = action
                break
    return policy


def adjacent_cell(layout: RoomsLayout, room: int, hallway: int) -> int:
    r, c = layout.hallways[hallway]
    room_cells = set(layout.rooms[room])
    for dr, dc in MOVES.values():
        if (r + dr, c + dc) in room_cells:
            return layout.cell_index((r + dr, c + dc))
    raise ValueError(f"hallway {hallway} does not touch room {room}")


@dataclass
class HallwaySpec:
    room: int
    target: int
    entry: int  # the room's other hallway


def build_hallway_options(mdp: FlatMdp, layout: RoomsLayout) -> tuple[list[MarkovOption], MarkovOption, list[HallwaySpec]]:
    """Eight hallway options (two per room) and ``room_nop``."""
    table = mdp.space.table
    pos, doors, key = table[:, 0], table[:, 1], table[:, 2]
    options, specs = [], []
    for room in range(len(layout.rooms)):
        room_idx = np.array([layout.cell_index(c) for c in layout.rooms[room]])
        in_room = np.isin(pos, room_idx)
        for target in sorted(layout.room_hallways[room]):
            entry = [h for h in layout.room_hallways[room] if h != target][0]
            target_pos = layout.cell_index(layout.hallways[target])
            entry_pos = layout.cell_index(layout.hallways[entry])
            adj = adjacent_cell(layout, room, target)
            door_open = (doors >> target & 1).astype(bool)
            holding = key == HOLDING
            at_adj = pos == adj

            initiation = (in_room | (pos == entry_pos)) & ~(at_adj & ~door_open & ~holding)
            beta = np.ones(len(pos))
            beta[in_room | (pos == entry_pos)] = 0.0
            beta[at_adj & ~door_open & ~holding] = 1.0
            beta[pos == target_pos] = 1.0

            moves = _bfs_policy(layout, room, target)
            action_col = np.zeros(layout.n_cells, dtype=np.int64)
            for cell, action in moves.items():
                action_col[cell] = NAV_ACTIONS.index(action)
            policy = np.zeros((len(pos), len(NAV_ACTIONS)))
            policy[np.arange(len(pos)), action_col[pos]] = 1.0

            name = f"hallway_{len(options)}"
            options.append(MarkovOption(name, NAV_ACTIONS, initiation, policy, beta, NAV_VARS, KEY_VARS))
            specs.append(HallwaySpec(room, target, entry))
    n = len(pos)
    room_nop = MarkovOption("room_nop", ("room_nop",), np.ones(n, bool), np.ones((n, 1)), np.ones(n), NAV_VARS)
    return options, room_nop, specs


def build_key_options(mdp: FlatMdp) -> list[MarkovOption]:
    """``pickup_key`` (multi-step), ``key_nop`` and ``putback_key`` (single-step)."""
    key = mdp.space.table[:, 2]
    n = len(key)
    ones = np.ones((n, 1))
    pickup = MarkovOption(
        "pickup_key", ("get_key",), key != HOLDING, ones, (key == HOLDING).astype(float), KEY_VARS
    )
    key_nop = MarkovOption("key_nop", ("key_nop",), np.ones(n, bool), ones, np.ones(n), KEY_VARS)
    putback = MarkovOption("putback_key", ("putback_key",), key == HOLDING, ones, np.ones(n), KEY_VARS)
    return [pickup, key_nop, putback]


def build_partition_rooms(hallway_options, room_nop, key_options) -> CoherencePartition:
    nav = [o.name for o in hallway_options] + [room_nop.name]
    keys = [o.name for o in key_options]
    return build_partition(list(hallway_options) + [room_nop] + list(key_options), [nav, keys])


@dataclass(eq=False)
class RoomsDomain:
    layout: RoomsLayout
    mdp: FlatMdp
    hallway_options: list[MarkovOption]
    room_nop: MarkovOption
    key_options: list[MarkovOption]
    hallway_specs: list[HallwaySpec]
    partition: CoherencePartition

    @property
    def options(self) -> list[MarkovOption]:
        return self.partition.options

    def option(self, name: str) -> MarkovOption:
        for o in self.options:
            if o.name == name:
                return o
        raise KeyError(f"unknown option {name!r}")

    def state(self, cell, doors: int = 0, key: int = 0) -> int:
        """Ordinal of the state with the agent at grid ``cell``."""
        return self.mdp.space.ordinal((self.layout.cell_index(cell), doors, key))

    @property
    def start(self) -> int:
        return self.state(self.layout.start, 0, 0)

    def hallway_option(self, room: int, target: int) -> MarkovOption:
        for o, spec in zip(self.hallway_options, self.hallway_specs):
            if spec.room == room and spec.target == target:
                return o
        raise KeyError((room, target))

    def actions(self, framework: str, rule: str = "t2") -> list[MultiOption]:
        """Action set: every class product (concurrent) or each option alone (sequential)."""
        if framework == "concurrent":
            return all_multi_options(self.partition, rule)
        if framework == "sequential":
            return [MultiOption((o,), "t2") for o in self.options]
        raise ValueError(f"unknown framework {framework!r}")


def build_rooms_domain(layout: RoomsLayout | None = None, gamma: float = 0.9) -> RoomsDomain:
    layout = layout or default_layout()
    mdp = build_rooms_mdp(layout, gamma)
    hallways, room_nop, specs = build_hallway_options(mdp, layout)
    keys = build_key_options(mdp)
    partition = build_partition_rooms(hallways, room_nop, keys)
    return RoomsDomain(layout, mdp, hallways, room_nop, keys, specs, partition)
