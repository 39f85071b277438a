"""Discrete corridor gridworlds with simultaneous multi-agent moves.

Coordinates are ``(x, y)`` with the origin at the top-left cell and ``y``
growing downward.  Actions are grid-absolute: ``F`` is north, ``B`` south,
``L`` west and ``R`` east.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass
from importlib import resources
from typing import Callable, Iterable, NamedTuple, Sequence

Cell = tuple[int, int]

STEP_MAX = 50
PERF_WEIGHT = 1.0
COLLISION_PENALTY = 0.5


class ParseError(ValueError):
    """Malformed map text."""


class ValidationError(ValueError):
    """Map parses but violates a world invariant."""


class GridAction(enum.IntEnum):
    W = 0
    F = 1
    B = 2
    L = 3
    R = 4


N_ACTIONS = len(GridAction)

DELTAS: dict[GridAction, Cell] = {
    GridAction.W: (0, 0),
    GridAction.F: (0, -1),
    GridAction.B: (0, 1),
    GridAction.L: (-1, 0),
    GridAction.R: (1, 0),
}


class Observation(NamedTuple):
    x: int
    y: int
    x_g: int
    y_g: int


def manhattan(a: Cell, b: Cell) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def apply_delta(cell: Cell, action: GridAction) -> Cell:
    dx, dy = DELTAS[GridAction(action)]
    return (cell[0] + dx, cell[1] + dy)


@dataclass(frozen=True)
class JointState:
    positions: tuple[Cell, ...]
    step_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "positions", tuple(tuple(p) for p in self.positions))
        if self.step_index < 0:
            raise ValueError("step_index must be non-negative")


@dataclass(frozen=True)
class GridMap:
    """Static layout: bounds and wall cells."""

    width: int
    height: int
    walls: frozenset

    def __post_init__(self):
        object.__setattr__(self, "walls", frozenset(tuple(w) for w in self.walls))
        if self.width <= 0 or self.height <= 0:
            raise ValidationError("grid must be non-empty")

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def is_free(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and cell not in self.walls

    def free_cells(self) -> list[Cell]:
        return [(x, y) for y in range(self.height) for x in range(self.width) if (x, y) not in self.walls]


@dataclass(frozen=True)
class GridWorld(GridMap):
    """A layout plus one start and one goal cell per agent; validated on construction."""

    scenario_id: str
    starts: tuple[Cell, ...]
    goals: tuple[Cell, ...]

    def __post_init__(self):
        super().__post_init__()
        object.__setattr__(self, "starts", tuple(tuple(s) for s in self.starts))
        object.__setattr__(self, "goals", tuple(tuple(g) for g in self.goals))
        self._validate()

    def _validate(self):
        if len(self.starts) != len(self.goals):
            raise ValidationError("starts and goals differ in length")
        if len(self.starts) == 0:
            raise ValidationError("world needs at least one agent")
        for kind, cells in (("start", self.starts), ("goal", self.goals)):
            for i, c in enumerate(cells):
                if not self.in_bounds(c):
                    raise ValidationError(f"{kind} of agent {i} at {c} is out of bounds")
                if c in self.walls:
                    raise ValidationError(f"{kind} of agent {i} at {c} is on a wall")
            if len(set(cells)) != len(cells):
                raise ValidationError(f"two agents share a {kind} cell")
        for i, (s, g) in enumerate(zip(self.starts, self.goals)):
            if s == g:
                raise ValidationError(f"agent {i} starts on its goal")
            if bfs_distance(self, s, g) is None:
                raise ValidationError(f"goal of agent {i} is unreachable from its start")

    @property
    def n_agents(self) -> int:
        return len(self.starts)

    def initial_state(self) -> JointState:
        return JointState(self.starts, 0)

    def initial_distances(self) -> tuple[int, ...]:
        return tuple(manhattan(s, g) for s, g in zip(self.starts, self.goals))


@dataclass(frozen=True)
class StepResult:
    next_state: JointState
    rewards: tuple[float, ...]
    collisions: tuple[bool, ...]
    done: bool


def bfs_distance(world, start: Cell, goal: Cell) -> int | None:
    """Single-agent shortest path length through free cells, ignoring other agents."""
    if start == goal:
        return 0
    seen = {start}
    queue = deque([(start, 0)])
    while queue:
        cell, d = queue.popleft()
        for a in (GridAction.F, GridAction.B, GridAction.L, GridAction.R):
            nxt = apply_delta(cell, a)
            if nxt in seen or not world.is_free(nxt):
                continue
            if nxt == goal:
                return d + 1
            seen.add(nxt)
            queue.append((nxt, d + 1))
    return None


# ---------------------------------------------------------------------------
# map text

def parse_map_text(text: str) -> tuple[list[str], dict[str, str]]:
    """Split map text into grid rows and a ``key -> value`` metadata dict."""
    lines = text.replace("\r\n", "\n").split("\n")
    while lines and not lines[0].strip():
        lines.pop(0)
    rows: list[str] = []
    i = 0
    while i < len(lines) and lines[i].strip():
        rows.append(lines[i].rstrip())
        i += 1
    if not rows:
        raise ParseError("map has no grid block")
    if len({len(r) for r in rows}) != 1:
        raise ParseError("grid rows must have equal length")
    for r in rows:
        bad = set(r) - set("#.0123456789")
        if bad:
            raise ParseError(f"unknown grid characters {sorted(bad)}")
    meta: dict[str, str] = {}
    for line in lines[i:]:
        line = line.strip()
        if not line or line.startswith(";"):
            continue
        if "=" not in line:
            raise ParseError(f"metadata line without '=': {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in meta:
            raise ParseError(f"duplicate metadata key {key!r}")
        meta[key] = value
    return rows, meta


def parse_cell(value: str) -> Cell:
    try:
        x, y = (int(v) for v in value.strip().strip("()").split(","))
    except ValueError as exc:
        raise ParseError(f"bad cell {value!r}") from exc
    return (x, y)


def grid_cells(rows: Sequence[str]) -> tuple[frozenset, dict[int, Cell]]:
    walls = set()
    starts: dict[int, Cell] = {}
    for y, row in enumerate(rows):
        for x, ch in enumerate(row):
            if ch == "#":
                walls.add((x, y))
            elif ch.isdigit():
                k = int(ch)
                if k in starts:
                    raise ParseError(f"agent {k} has two start markers")
                starts[k] = (x, y)
    return frozenset(walls), starts


def load_scenario(map_text: str) -> GridWorld:
    rows, meta = parse_map_text(map_text)
    walls, starts = grid_cells(rows)
    n = len(starts)
    if sorted(starts) != list(range(n)):
        raise ParseError("start markers must be numbered 0..n-1")
    goals: dict[int, Cell] = {}
    name = None
    for key, value in meta.items():
        if key == "name":
            name = value
        elif key.startswith("goal."):
            try:
                k = int(key[5:])
            except ValueError as exc:
                raise ParseError(f"bad goal key {key!r}") from exc
            goals[k] = parse_cell(value)
        else:
            raise ParseError(f"unknown metadata key {key!r}")
    if name is None:
        raise ParseError("missing 'name' line")
    if sorted(goals) != list(range(n)):
        raise ParseError("need exactly one goal line per agent")
    return GridWorld(
        width=len(rows[0]),
        height=len(rows),
        walls=walls,
        scenario_id=name,
        starts=tuple(starts[k] for k in range(n)),
        goals=tuple(goals[k] for k in range(n)),
    )


def render(world, positions: Iterable[Cell] | None = None) -> str:
    """ASCII grid with agent digits at ``positions`` (defaults to the starts)."""
    if positions is None:
        positions = world.starts
    where = {tuple(p): k for k, p in enumerate(positions)}
    lines = []
    for y in range(world.height):
        row = []
        for x in range(world.width):
            if (x, y) in where:
                row.append(str(where[(x, y)]))
            else:
                row.append("#" if (x, y) in world.walls else ".")
        lines.append("".join(row))
    return "\n".join(lines)


def dump_scenario(world: GridWorld) -> str:
    meta = [f"goal.{k} = {g[0]},{g[1]}" for k, g in enumerate(world.goals)]
    meta.append(f"name = {world.scenario_id}")
    return render(world) + "\n\n" + "\n".join(meta) + "\n"


CANONICAL_SCENARIOS = ("asym_two_slot", "sym_two_slot", "single_slot", "two_path", "maze")


def builtin_map_text(name: str) -> str:
    return resources.files("marlin.scenarios").joinpath(f"{name}.map").read_text()


def load_builtin(name: str) -> GridWorld:
    """Load one of the shipped corridor scenarios by name."""
    return load_scenario(builtin_map_text(name))


# ---------------------------------------------------------------------------
# dynamics

def resolve_moves(
    positions: Sequence[Cell], targets: Sequence[Cell], is_free: Callable[[Cell], bool]
) -> tuple[list[Cell], list[bool]]:
    """Resolve simultaneous intents; returns final cells and per-agent blocked flags.

    Waiting agents (target == position) are never flagged.  A mover is blocked
    by walls/bounds, by a contested target, by a head-on swap, or by moving
    into a cell whose occupant stays put.  The last rule is iterated to a fixed
    point so that followers behind a moving head advance together.
    """
    n = len(positions)
    moving = [targets[i] != positions[i] for i in range(n)]
    blocked = [False] * n
    for i in range(n):
        if moving[i] and not is_free(targets[i]):
            blocked[i] = True
    claims: dict[Cell, list[int]] = {}
    for i in range(n):
        if moving[i] and not blocked[i]:
            claims.setdefault(targets[i], []).append(i)
    for ids in claims.values():
        if len(ids) > 1:
            for i in ids:
                blocked[i] = True
    index_at = {p: i for i, p in enumerate(positions)}
    for i in range(n):
        j = index_at.get(targets[i])
        if moving[i] and j is not None and j != i and moving[j] and targets[j] == positions[i]:
            blocked[i] = blocked[j] = True
    changed = True
    while changed:
        changed = False
        for i in range(n):
            if not moving[i] or blocked[i]:
                continue
            j = index_at.get(targets[i])
            if j is not None and (not moving[j] or blocked[j]):
                blocked[i] = True
                changed = True
    final = [positions[i] if (blocked[i] or not moving[i]) else targets[i] for i in range(n)]
    return final, blocked


def observe(world: GridWorld, state: JointState, agent: int) -> Observation:
    x, y = state.positions[agent]
    gx, gy = world.goals[agent]
    return Observation(x, y, gx, gy)


def all_at_goals(world: GridWorld, state: JointState) -> bool:
    return all(p == g for p, g in zip(state.positions, world.goals))


def progress(world: GridWorld, state: JointState, agent: int) -> float:
    d = manhattan(state.positions[agent], world.goals[agent])
    D = manhattan(world.starts[agent], world.goals[agent])
    return max(0.0, 1.0 - d / D)


def reward(
    world: GridWorld,
    state: JointState,
    agent: int,
    collision: bool,
    *,
    w: float = PERF_WEIGHT,
    rho: float = COLLISION_PENALTY,
) -> float:
    return w * progress(world, state, agent) - (rho if collision else 0.0)


def performance(world: GridWorld, state: JointState) -> float:
    """Mean normalized progress toward goals; 1.0 exactly when every agent is home."""
    n = world.n_agents
    return sum(progress(world, state, i) for i in range(n)) / n


def step(
    world: GridWorld,
    state: JointState,
    actions: Sequence[GridAction],
    *,
    step_max: int = STEP_MAX,
    w: float = PERF_WEIGHT,
    rho: float = COLLISION_PENALTY,
) -> StepResult:
    if len(actions) != world.n_agents:
        raise ValueError(f"expected {world.n_agents} actions, got {len(actions)}")
    targets = [apply_delta(p, a) for p, a in zip(state.positions, actions)]
    final, blocked = resolve_moves(state.positions, targets, world.is_free)
    nxt = JointState(tuple(final), state.step_index + 1)
    rewards = tuple(reward(world, nxt, i, blocked[i], w=w, rho=rho) for i in range(world.n_agents))
    done = all_at_goals(world, nxt) or nxt.step_index >= step_max
    return StepResult(nxt, rewards, tuple(blocked), done)
