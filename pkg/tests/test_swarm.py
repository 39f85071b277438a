import csv
import itertools

import numpy as np
import pytest

from marlin.gridworld import GridAction, ParseError, ValidationError
from marlin.negotiation import OracleBackend, ScriptedBackend
from marlin.swarm import (
    AgentStatus,
    SwarmAgent,
    check_occupancy,
    detect_conflict,
    initial_agents,
    load_builtin_swarm,
    load_swarm_map,
    run_swarm,
    swarm_tick,
    zone_window,
)
from oracles import joint_bfs_length, parse_grid, single_bfs

CORRIDOR_ROWS = "########\n#..01..#\n########\n"
CORRIDOR = CORRIDOR_ROWS + "\nexit = 6,1\nzone.0 = (1,1)-(6,1)\nname = corridor\n"
CORRIDOR_NO_ZONE = CORRIDOR_ROWS + "\nexit = 6,1\nname = corridor\n"


class CycleRng:
    """Stands in for the random walk: returns the given neighbour indices in turn."""

    def __init__(self, picks):
        self._picks = itertools.cycle(picks)

    def integers(self, n):
        return next(self._picks) % n


@pytest.fixture
def fixture_map():
    return load_builtin_swarm()


def oracle_pair():
    return [OracleBackend(), OracleBackend()]


def test_fixture_shape(fixture_map):
    assert len(fixture_map.starts) == 6
    assert fixture_map.bfs_bound() == 36
    w, h, walls, starts, _ = parse_grid(open_fixture_text())
    for k, s in starts.items():
        assert fixture_map.exit_distances[s] == single_bfs(w, h, walls, s, fixture_map.exit)


def open_fixture_text():
    from importlib import resources
    return resources.files("marlin.scenarios").joinpath("swarm_maze.map").read_text()


def test_detect_conflict_examples(fixture_map):
    zone0 = sorted(fixture_map.zones[0])
    agents = [SwarmAgent(k, fixture_map.starts[k]) for k in range(6)]
    assert detect_conflict(fixture_map, [agents[0], agents[2], agents[4]]) == []
    assert detect_conflict(fixture_map, [SwarmAgent(3, zone0[0]), SwarmAgent(7, zone0[4])]) == [(3, 7)]
    trio = [SwarmAgent(9, zone0[1]), SwarmAgent(4, zone0[3]), SwarmAgent(6, zone0[5])]
    assert detect_conflict(fixture_map, trio) == [(4, 6)]
    gone = SwarmAgent(1, None, AgentStatus.EXITED)
    assert detect_conflict(fixture_map, [gone, SwarmAgent(2, zone0[0])]) == []


def test_agent_status_invariant():
    with pytest.raises(ValueError):
        SwarmAgent(0, None, AgentStatus.WALKING)
    with pytest.raises(ValueError):
        SwarmAgent(0, (1, 1), AgentStatus.EXITED)


def test_single_agent_next_to_exit_leaves():
    smap = load_swarm_map("#####\n#0..#\n#####\n\nexit = 3,1\nname = tiny\n")
    agents = [SwarmAgent(0, (2, 1))]
    east = 1  # legal moves from (2,1) are [west, east]
    out = swarm_tick(smap, agents, [], CycleRng([east]))
    assert out == [SwarmAgent(0, None, AgentStatus.EXITED)]


def test_head_on_pair_deadlocks_under_random_walk_alone():
    smap = load_swarm_map(CORRIDOR_NO_ZONE)
    agents = initial_agents(smap)
    rng = CycleRng([1, 0])  # agent 0 steps east, agent 1 steps west: a head-on swap every tick
    for t in range(20):
        agents = swarm_tick(smap, agents, [], rng, tick=t)
    assert [a.position for a in agents] == [(3, 1), (4, 1)]


def test_negotiation_breaks_the_deadlock_within_joint_bfs_bound():
    smap = load_swarm_map(CORRIDOR)
    w, h, walls, starts, _ = parse_grid(CORRIDOR_ROWS)
    # the pair's local goals are the exit for the agent in front and the cell behind it for the other
    bound = joint_bfs_length(w, h, walls, [starts[0], starts[1]], [(5, 1), (6, 1)])
    assert bound == 2
    agents = initial_agents(smap)
    events = []
    rng = CycleRng([1, 0])
    history = [agents]
    for t in range(bound + 1):
        agents = swarm_tick(smap, agents, oracle_pair(), rng, tick=t, events=events)
        history.append(agents)
    assert history[bound][1].status is AgentStatus.EXITED
    assert history[bound][0].position == (5, 1)
    assert all(e.outcome == "agreed" for e in events) and len(events) == bound
    assert history[bound + 1][0].status is AgentStatus.EXITED


def test_tick_is_identity_once_everyone_left(fixture_map):
    gone = [SwarmAgent(k, None, AgentStatus.EXITED) for k in range(6)]
    assert swarm_tick(fixture_map, gone, oracle_pair(), np.random.default_rng(0)) == gone


def test_backend_error_makes_the_pair_wait():
    smap = load_swarm_map(CORRIDOR)
    agents = initial_agents(smap)
    events = []
    out = swarm_tick(smap, agents, [ScriptedBackend([]), ScriptedBackend([])], np.random.default_rng(0), events=events)
    assert [a.position for a in out] == [(3, 1), (4, 1)]
    assert [a.status for a in out] == [AgentStatus.NEGOTIATING] * 2
    assert events[0].outcome == "backend-error" and events[0].actions == (GridAction.W, GridAction.W)


@pytest.mark.parametrize("seed", range(4))
def test_runs_keep_occupancy_and_negotiate_only_inside_zones(fixture_map, seed):
    result = run_swarm(fixture_map, oracle_pair(), seed)
    assert all(check_occupancy(agents) for agents in result.history)
    for e in result.events:
        assert all(fixture_map.zone_of(p) == e.zone for p in e.positions)
    for before, after in zip(result.history, result.history[1:]):
        for a, b in zip(before, after):
            if a.active and b.active:
                assert abs(a.position[0] - b.position[0]) + abs(a.position[1] - b.position[1]) <= 1
            if not a.active:
                assert not b.active


def test_zone_window_goals_are_solvable(fixture_map):
    zone0 = sorted(fixture_map.zones[0])
    for p, q in itertools.permutations(zone0, 2):
        win = zone_window(fixture_map, 0, (p, q), [])
        assert win is not None
        world = win.world
        assert world.goals[0] != world.goals[1]
        assert world.goals[0] != world.starts[0] and world.goals[1] != world.starts[1]


def test_result_csv(tmp_path, fixture_map):
    result = run_swarm(fixture_map, oracle_pair(), 0, n_agents=2)
    path = tmp_path / "swarm.csv"
    result.write_csv(path)
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 2 * (result.ticks + 1)
    assert rows[0].keys() == {"tick", "agent", "x", "y", "status"}
    exits = result.exit_ticks()
    for k, t in exits.items():
        if t is not None:
            row = next(r for r in rows if r["agent"] == str(k) and r["tick"] == str(t))
            assert row["status"] == "exited" and row["x"] == ""


def test_deterministic_given_seed(fixture_map):
    a = run_swarm(fixture_map, oracle_pair(), 7)
    b = run_swarm(fixture_map, oracle_pair(), 7)
    assert a.history == b.history


@pytest.mark.parametrize("text,error", [
    ("#####\n#0..#\n#####\n\nname = x\n", ParseError),
    ("#####\n#0..#\n#####\n\nexit = 3,1\n", ParseError),
    ("#####\n#0..#\n#####\n\nexit = 0,0\nname = x\n", ValidationError),
    ("#####\n#0#.#\n#####\n\nexit = 3,1\nname = x\n", ValidationError),
    ("#####\n#0..#\n#####\n\nexit = 3,1\nzone.0 = (1,1)-(2,1)\nzone.1 = (2,1)-(3,1)\nname = x\n", ValidationError),
    ("#####\n#0..#\n#####\n\nexit = 3,1\nzone.0 = (1,1)-(9,1)\nname = x\n", ValidationError),
    ("#####\n#0..#\n#####\n\nexit = 3,1\nzone.1 = (1,1)-(2,1)\nname = x\n", ParseError),
    ("#####\n#0..#\n#####\n\nexit = 3,1\ncolour = red\nname = x\n", ParseError),
])
def test_map_errors(text, error):
    with pytest.raises(error):
        load_swarm_map(text)


def test_too_many_agents(fixture_map):
    with pytest.raises(ValueError):
        initial_agents(fixture_map, 7)
