"""Many-agent random walk toward a shared exit with pairwise negotiation in corridors.

Agents wander a maze one random step per tick.  When two walking agents find
themselves inside the same declared conflict zone, they stop wandering and
negotiate a joint move over a small window around the zone, aiming for the
cells of that window closest to the exit.  Agents that step onto the exit
leave the map.
"""

from __future__ import annotations

import csv
import enum
import itertools
import logging
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from typing import Sequence

import numpy as np

from marlin.gridworld import (
    Cell,
    GridAction,
    GridMap,
    GridWorld,
    JointState,
    ParseError,
    ValidationError,
    apply_delta,
    grid_cells,
    parse_cell,
    parse_map_text,
    resolve_moves,
)
from marlin.search import joint_bfs
from marlin.negotiation import BackendError, NegotiationConfig, NegotiationSession, negotiate_round

log = logging.getLogger(__name__)

MOVES = (GridAction.F, GridAction.B, GridAction.L, GridAction.R)
ZONE_MARGIN = 1


def distance_map(grid: GridMap, source: Cell) -> dict[Cell, int]:
    """BFS distance from ``source`` to every reachable free cell."""
    dist = {source: 0}
    queue = deque([source])
    while queue:
        cell = queue.popleft()
        for a in MOVES:
            nxt = apply_delta(cell, a)
            if nxt not in dist and grid.is_free(nxt):
                dist[nxt] = dist[cell] + 1
                queue.append(nxt)
    return dist


@dataclass(frozen=True)
class SwarmMap:
    """A maze, one start per agent, a single exit cell and disjoint conflict zones."""

    grid: GridMap
    name: str
    starts: tuple[Cell, ...]
    exit: Cell
    zones: tuple[frozenset, ...]

    def __post_init__(self):
        object.__setattr__(self, "starts", tuple(tuple(s) for s in self.starts))
        object.__setattr__(self, "exit", tuple(self.exit))
        object.__setattr__(self, "zones", tuple(frozenset(tuple(c) for c in z) for z in self.zones))
        g = self.grid
        if not g.is_free(self.exit):
            raise ValidationError(f"exit {self.exit} is out of bounds or on a wall")
        if len(set(self.starts)) != len(self.starts):
            raise ValidationError("two agents share a start cell")
        dist = self.exit_distances
        for k, s in enumerate(self.starts):
            if not g.is_free(s):
                raise ValidationError(f"start of agent {k} at {s} is out of bounds or on a wall")
            if s == self.exit:
                raise ValidationError(f"agent {k} starts on the exit")
            if s not in dist:
                raise ValidationError(f"exit unreachable from the start of agent {k}")
        seen: set = set()
        for j, zone in enumerate(self.zones):
            if not zone:
                raise ValidationError(f"zone {j} has no free cells")
            for c in zone:
                if not g.is_free(c):
                    raise ValidationError(f"zone {j} cell {c} is out of bounds or on a wall")
            if seen & zone:
                raise ValidationError(f"zone {j} overlaps an earlier zone")
            seen |= zone

    @property
    def exit_distances(self) -> dict[Cell, int]:
        cached = self.__dict__.get("_exit_dist")
        if cached is None:
            cached = distance_map(self.grid, self.exit)
            object.__setattr__(self, "_exit_dist", cached)
        return cached

    def zone_of(self, cell: Cell) -> int | None:
        for j, zone in enumerate(self.zones):
            if cell in zone:
                return j
        return None

    def bfs_bound(self, n_agents: int | None = None) -> int:
        """Sum of single-agent exit distances over the first ``n_agents`` starts."""
        starts = self.starts if n_agents is None else self.starts[:n_agents]
        return sum(self.exit_distances[s] for s in starts)


def _parse_zone(value: str, grid: GridMap) -> frozenset:
    try:
        a, b = value.split("-")
    except ValueError as exc:
        raise ParseError(f"bad zone {value!r}; expected (x1,y1)-(x2,y2)") from exc
    (x1, y1), (x2, y2) = parse_cell(a), parse_cell(b)
    if not (grid.in_bounds((x1, y1)) and grid.in_bounds((x2, y2))):
        raise ValidationError(f"zone {value!r} leaves the grid")
    xs, ys = sorted((x1, x2)), sorted((y1, y2))
    return frozenset(
        (x, y) for x in range(xs[0], xs[1] + 1) for y in range(ys[0], ys[1] + 1) if (x, y) not in grid.walls
    )


def load_swarm_map(text: str) -> SwarmMap:
    """Parse a swarm map: grid rows, then ``exit``, ``zone.j`` and ``name`` lines."""
    rows, meta = parse_map_text(text)
    walls, starts = grid_cells(rows)
    n = len(starts)
    if sorted(starts) != list(range(n)):
        raise ParseError("start markers must be numbered 0..n-1")
    grid = GridMap(len(rows[0]), len(rows), walls)
    name, exit_cell, zones = None, None, {}
    for key, value in meta.items():
        if key == "name":
            name = value
        elif key == "exit":
            exit_cell = parse_cell(value)
        elif key.startswith("zone."):
            try:
                j = int(key[5:])
            except ValueError as exc:
                raise ParseError(f"bad zone key {key!r}") from exc
            zones[j] = _parse_zone(value, grid)
        else:
            raise ParseError(f"unknown metadata key {key!r}")
    if name is None:
        raise ParseError("missing 'name' line")
    if exit_cell is None:
        raise ParseError("missing 'exit' line")
    if sorted(zones) != list(range(len(zones))):
        raise ParseError("zones must be numbered 0..k-1")
    return SwarmMap(grid, name, tuple(starts[k] for k in range(n)), exit_cell, tuple(zones[j] for j in range(len(zones))))


def load_builtin_swarm(name: str = "swarm_maze") -> SwarmMap:
    return load_swarm_map(resources.files("marlin.scenarios").joinpath(f"{name}.map").read_text())


class AgentStatus(str, enum.Enum):
    WALKING = "walking"
    NEGOTIATING = "negotiating"
    EXITED = "exited"


@dataclass(frozen=True)
class SwarmAgent:
    id: int
    position: Cell | None
    status: AgentStatus = AgentStatus.WALKING

    def __post_init__(self):
        if (self.status is AgentStatus.EXITED) != (self.position is None):
            raise ValueError("exited agents, and only they, have no position")

    @property
    def active(self) -> bool:
        return self.status is not AgentStatus.EXITED


def initial_agents(smap: SwarmMap, n_agents: int | None = None) -> list[SwarmAgent]:
    n = len(smap.starts) if n_agents is None else n_agents
    if not 1 <= n <= len(smap.starts):
        raise ValueError(f"map declares {len(smap.starts)} starts; cannot place {n} agents")
    return [SwarmAgent(k, smap.starts[k]) for k in range(n)]


def detect_conflict(smap: SwarmMap, agents: Sequence[SwarmAgent]) -> list[tuple[int, int]]:
    """Pairs of active agents sharing a conflict zone; the two lowest ids per zone."""
    members: dict[int, list[int]] = {}
    for a in agents:
        if not a.active:
            continue
        j = smap.zone_of(a.position)
        if j is not None:
            members.setdefault(j, []).append(a.id)
    pairs = []
    for j in sorted(members):
        ids = sorted(members[j])
        if len(ids) >= 2:
            pairs.append((ids[0], ids[1]))
    return pairs


@dataclass
class NegotiationEvent:
    tick: int
    zone: int
    pair: tuple[int, int]
    positions: tuple[Cell, Cell]
    outcome: str  # "agreed", "backend-error", "no-local-goals"
    actions: tuple[GridAction, ...] | None = None
    transcript: list = field(default_factory=list)


@dataclass
class _Window:
    x0: int
    y0: int
    world: GridWorld

    def to_local(self, c: Cell) -> Cell:
        return (c[0] - self.x0, c[1] - self.y0)


def zone_window(smap: SwarmMap, zone: int, pair_positions: Sequence[Cell], obstacles: Sequence[Cell]) -> _Window | None:
    """Two-agent world over the zone's bounding box plus a margin.

    Other agents inside the box are treated as walls.  Local goals are the two
    distinct cells nearest the exit; the pair takes the assignment with the
    lowest total exit distance that has a joint solution and in which nobody
    is assigned the cell it already stands on (agents in a one-wide corridor
    cannot cross).  Returns ``None`` when no such assignment exists.
    """
    cells = smap.zones[zone]
    g = smap.grid
    x0 = max(0, min(x for x, _ in cells) - ZONE_MARGIN)
    y0 = max(0, min(y for _, y in cells) - ZONE_MARGIN)
    x1 = min(g.width - 1, max(x for x, _ in cells) + ZONE_MARGIN)
    y1 = min(g.height - 1, max(y for _, y in cells) + ZONE_MARGIN)
    blocked = set(obstacles)
    walls = set()
    for y in range(y0, y1 + 1):
        for x in range(x0, x1 + 1):
            if (x, y) in g.walls or (x, y) in blocked:
                walls.add((x - x0, y - y0))
    local = GridMap(x1 - x0 + 1, y1 - y0 + 1, frozenset(walls))
    starts = tuple((p[0] - x0, p[1] - y0) for p in pair_positions)
    reach = [distance_map(local, s) for s in starts]
    exit_d = smap.exit_distances
    candidates = sorted(
        (c for c in local.free_cells() if (c[0] + x0, c[1] + y0) in exit_d),
        key=lambda c: (exit_d[(c[0] + x0, c[1] + y0)], c[1], c[0]),
    )
    options = []
    for g0, g1 in itertools.permutations(candidates[:6], 2):
        if g0 == starts[0] or g1 == starts[1] or g0 not in reach[0] or g1 not in reach[1]:
            continue
        cost = exit_d[(g0[0] + x0, g0[1] + y0)] + exit_d[(g1[0] + x0, g1[1] + y0)]
        options.append((cost, (g0, g1)))
    for _, goals in sorted(options):
        if joint_bfs(local, starts, goals) is not None:
            world = GridWorld(local.width, local.height, local.walls, f"{smap.name}-zone{zone}", starts, goals)
            return _Window(x0, y0, world)
    return None


def _random_move(smap: SwarmMap, cell: Cell, rng: np.random.Generator) -> GridAction:
    legal = [a for a in MOVES if smap.grid.is_free(apply_delta(cell, a))]
    if not legal:
        return GridAction.W
    return legal[int(rng.integers(len(legal)))]


def swarm_tick(
    smap: SwarmMap,
    agents: Sequence[SwarmAgent],
    backends: Sequence,
    rng: np.random.Generator,
    cfg: NegotiationConfig = NegotiationConfig(),
    tick: int = 0,
    events: list | None = None,
) -> list[SwarmAgent]:
    """Advance every active agent by one simultaneous move.

    Conflicted pairs act on one negotiated joint move; everyone else takes a
    uniformly random step toward a non-wall neighbour.  A backend failure
    makes the pair wait this tick.  Pairs plan in zone order, and cells that
    an earlier pair is about to enter count as obstacles for later pairs, so
    two pairs converging on one cell cannot lock each other out forever.
    Random numbers are drawn for every active agent in id order whether or
    not it ends up negotiating, so the random walk of one agent does not
    depend on negotiations elsewhere.
    """
    agents = sorted(agents, key=lambda a: a.id)
    active = [a for a in agents if a.active]
    if not active:
        return list(agents)
    intent = {a.id: _random_move(smap, a.position, rng) for a in active}
    negotiating: set[int] = set()
    pos = {a.id: a.position for a in active}
    reserved: set[Cell] = set()
    for i, j in detect_conflict(smap, active):
        zone = smap.zone_of(pos[i])
        others = {pos[k] for k in pos if k not in (i, j)} | reserved
        others -= {pos[i], pos[j]}
        window = zone_window(smap, zone, (pos[i], pos[j]), sorted(others))
        if window is None:
            if events is not None:
                events.append(NegotiationEvent(tick, zone, (i, j), (pos[i], pos[j]), "no-local-goals"))
            continue
        negotiating.update((i, j))
        local_state = JointState(window.world.starts, 0)
        session = NegotiationSession(window.world, local_state, f"tick{tick}-zone{zone}")
        try:
            actions, _ = negotiate_round(window.world, local_state, backends, cfg, session)
        except BackendError as exc:
            log.warning("negotiation between agents %d and %d failed: %s; both wait", i, j, exc)
            actions, outcome = (GridAction.W, GridAction.W), "backend-error"
        else:
            outcome = "agreed"
        intent[i], intent[j] = actions
        reserved.update(apply_delta(pos[k], intent[k]) for k in (i, j))
        if events is not None:
            events.append(NegotiationEvent(tick, zone, (i, j), (pos[i], pos[j]), outcome, actions, session.records()))
    ids = [a.id for a in active]
    positions = [pos[k] for k in ids]
    targets = [apply_delta(pos[k], intent[k]) for k in ids]
    final, _ = resolve_moves(positions, targets, smap.grid.is_free)
    moved = {k: c for k, c in zip(ids, final)}
    out = []
    for a in agents:
        if not a.active:
            out.append(a)
        elif moved[a.id] == smap.exit:
            out.append(SwarmAgent(a.id, None, AgentStatus.EXITED))
        else:
            status = AgentStatus.NEGOTIATING if a.id in negotiating else AgentStatus.WALKING
            out.append(SwarmAgent(a.id, moved[a.id], status))
    return out


@dataclass
class SwarmResult:
    history: list[list[SwarmAgent]]
    events: list[NegotiationEvent]

    @property
    def ticks(self) -> int:
        return len(self.history) - 1

    @property
    def all_exited(self) -> bool:
        return all(not a.active for a in self.history[-1])

    def exit_ticks(self) -> dict[int, int | None]:
        """Tick at which each agent left the map (``None`` if it never did)."""
        out: dict[int, int | None] = {a.id: None for a in self.history[0]}
        for t, agents in enumerate(self.history):
            for a in agents:
                if not a.active and out[a.id] is None:
                    out[a.id] = t
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tick", "agent", "x", "y", "status"])
            for t, agents in enumerate(self.history):
                for a in agents:
                    x, y = a.position if a.position is not None else ("", "")
                    w.writerow([t, a.id, x, y, a.status.value])


def run_swarm(
    smap: SwarmMap,
    backends: Sequence,
    seed: int,
    n_agents: int | None = None,
    ticks_max: int | None = None,
    cfg: NegotiationConfig = NegotiationConfig(),
) -> SwarmResult:
    """Tick until every agent has exited or ``ticks_max`` (default 10x the BFS bound) elapses."""
    agents = initial_agents(smap, n_agents)
    if ticks_max is None:
        ticks_max = 10 * smap.bfs_bound(len(agents))
    rng = np.random.default_rng(seed)
    history = [agents]
    events: list[NegotiationEvent] = []
    for t in range(ticks_max):
        if all(not a.active for a in agents):
            break
        agents = swarm_tick(smap, agents, backends, rng, cfg, tick=t, events=events)
        history.append(agents)
    return SwarmResult(history, events)


def check_occupancy(agents: Sequence[SwarmAgent]) -> bool:
    cells = [a.position for a in agents if a.active]
    return len(cells) == len(set(cells))


__all__ = [
    "AgentStatus",
    "NegotiationEvent",
    "SwarmAgent",
    "SwarmMap",
    "SwarmResult",
    "check_occupancy",
    "detect_conflict",
    "distance_map",
    "initial_agents",
    "load_builtin_swarm",
    "load_swarm_map",
    "run_swarm",
    "swarm_tick",
    "zone_window",
]
