import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from marlin.gridworld import GridAction, JointState, load_builtin
from marlin.negotiation import Plan
from marlin.plan_cache import PlanCache, StateKey, state_key
from oracles import running_max


def plan(perf, origin=((0, 1), (4, 1)), moves=((GridAction.R, GridAction.W),), ref=None):
    return Plan(origin, moves, perf, ref)


KEY = StateKey("single_slot", (((0, 1), (4, 1)), ((4, 1), (0, 1))))


def test_load_and_replace_examples():
    cache = PlanCache()
    assert cache.load_plan(KEY) is None and cache.llm_mean_perf(KEY) is None
    p = plan(0.6)
    assert cache.store_plan(KEY, p) and cache.load_plan(KEY) is p
    q = plan(0.9)
    assert cache.store_plan(KEY, q) and cache.load_plan(KEY) is q


def test_tie_is_rejected_but_sampled():
    cache = PlanCache()
    cache.store_plan(KEY, plan(0.8))
    assert not cache.store_plan(KEY, plan(0.8, ref="second"))
    assert cache.load_plan(KEY).transcript_ref is None
    assert cache.entries[KEY].llm_perf_samples == [0.8, 0.8]
    assert cache.store_plan(KEY, plan(1.0))


def test_llm_mean_perf_examples():
    cache = PlanCache()
    cache.store_plan(KEY, plan(1.0))
    assert cache.llm_mean_perf(KEY) == 1.0
    other = StateKey("x", KEY.agents)
    cache.store_plan(other, plan(0.5))
    cache.store_plan(other, plan(1.0))
    assert cache.llm_mean_perf(other) == 0.75


def test_out_of_range_performance_is_rejected():
    with pytest.raises(ValueError):
        PlanCache().store_plan(KEY, plan(1.5))


def test_state_key_ignores_agent_order_and_step():
    world = load_builtin("single_slot")
    a = state_key(world, JointState(((0, 1), (4, 1)), 0))
    b = state_key(world, JointState(((0, 1), (4, 1)), 17))
    assert a == b
    assert StateKey.from_str(a.as_str()) == a
    assert a != state_key(world, JointState(((4, 1), (0, 1))))


def test_hundred_stores_follow_running_max():
    rng = np.random.default_rng(0)
    perfs = list(rng.random(100))
    cache = PlanCache()
    seen = []
    for p in perfs:
        cache.store_plan(KEY, plan(p))
        seen.append(cache.load_plan(KEY).performance)
    assert seen == running_max(perfs)


OPS = st.lists(st.tuples(st.integers(0, 7), st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]) | st.floats(0, 1)),
               min_size=1, max_size=200)


@given(OPS)
def test_cached_performance_is_running_max_per_key(ops):
    keys = [StateKey(f"s{k}", KEY.agents) for k in range(8)]
    cache = PlanCache()
    history = {}
    for k, p in ops:
        before = cache.load_plan(keys[k])
        accepted = cache.store_plan(keys[k], plan(p))
        assert accepted == (before is None or p > before.performance)
        history.setdefault(k, []).append(p)
        assert cache.load_plan(keys[k]).performance == running_max(history[k])[-1]
        assert cache.load_plan(keys[k]).performance >= p
    for k, ps in history.items():
        assert cache.entries[keys[k]].llm_perf_samples == ps


def _random_ops_cache(seed, n_ops=1000):
    rng = np.random.default_rng(seed)
    world = load_builtin("maze")
    cache = PlanCache()
    history = {}
    cells = [(x, y) for x in range(world.width) for y in range(world.height) if world.is_free((x, y))]
    for _ in range(n_ops):
        pos = tuple(cells[i] for i in rng.choice(len(cells), 2, replace=False))
        key = state_key(world, JointState(pos))
        if rng.random() < 0.3:
            cache.load_plan(key)
            continue
        perf = float(rng.random()) if rng.random() < 0.7 else float(rng.integers(0, 5)) / 4
        moves = tuple(tuple(GridAction(int(a)) for a in rng.integers(0, 5, 2)) for _ in range(rng.integers(0, 4)))
        cache.store_plan(key, Plan(pos, moves, perf, f"s{rng.integers(1000)}"))
        history.setdefault(key, []).append(perf)
    return cache, history


def test_thousand_random_ops_match_fold_oracle():
    cache, history = _random_ops_cache(1)
    for key, perfs in history.items():
        assert cache.load_plan(key).performance == running_max(perfs)[-1]


def test_persistence_round_trip_is_bit_exact(tmp_path):
    cache, _ = _random_ops_cache(2)
    path = tmp_path / "cache.json"
    cache.save(path)
    back = PlanCache.load(path)
    assert back.entries.keys() == cache.entries.keys()
    for key, entry in cache.entries.items():
        other = back.entries[key]
        assert other.plan == entry.plan
        assert [x.hex() for x in other.llm_perf_samples] == [x.hex() for x in entry.llm_perf_samples]
        assert other.plan.performance.hex() == entry.plan.performance.hex()
    back.save(tmp_path / "again.json")
    assert (tmp_path / "again.json").read_text() == path.read_text()


def test_unknown_version_is_refused(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"version": 99, "entries": []}))
    with pytest.raises(ValueError):
        PlanCache.load(path)
