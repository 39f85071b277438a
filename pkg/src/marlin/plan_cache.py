"""Best-known negotiated plan per exact joint state, with replace-if-better writes."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple

from marlin.gridworld import GridAction, GridWorld, JointState
from marlin.negotiation.protocol import Plan

CACHE_FORMAT_VERSION = 1


class StateKey(NamedTuple):
    scenario_id: str
    agents: tuple  # sorted ((position), (goal)) pairs

    def as_str(self) -> str:
        cells = ";".join(f"{p[0]},{p[1]}>{g[0]},{g[1]}" for p, g in self.agents)
        return f"{self.scenario_id}|{cells}"

    @classmethod
    def from_str(cls, text: str) -> "StateKey":
        scenario, cells = text.split("|", 1)
        agents = []
        for item in cells.split(";"):
            p, g = item.split(">")
            agents.append((tuple(int(v) for v in p.split(",")), tuple(int(v) for v in g.split(","))))
        return cls(scenario, tuple(agents))


def state_key(world: GridWorld, state: JointState) -> StateKey:
    pairs = tuple(sorted((tuple(p), tuple(g)) for p, g in zip(state.positions, world.goals)))
    return StateKey(world.scenario_id, pairs)


@dataclass
class CacheEntry:
    plan: Plan
    llm_perf_samples: list[float] = field(default_factory=list)


class PlanCache:
    def __init__(self):
        self.entries: dict[StateKey, CacheEntry] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def load_plan(self, key: StateKey) -> Plan | None:
        entry = self.entries.get(key)
        return entry.plan if entry is not None else None

    def store_plan(self, key: StateKey, plan: Plan) -> bool:
        """Record the plan's performance; keep the plan only if it strictly beats the cached one."""
        if not 0.0 <= plan.performance <= 1.0:
            raise ValueError(f"plan performance {plan.performance} outside [0, 1]")
        entry = self.entries.get(key)
        if entry is None:
            self.entries[key] = CacheEntry(plan, [plan.performance])
            return True
        entry.llm_perf_samples.append(plan.performance)
        if plan.performance > entry.plan.performance:
            entry.plan = plan
            return True
        return False

    def llm_mean_perf(self, key: StateKey) -> float | None:
        entry = self.entries.get(key)
        if entry is None or not entry.llm_perf_samples:
            return None
        return sum(entry.llm_perf_samples) / len(entry.llm_perf_samples)

    # -- persistence --------------------------------------------------------

    def to_dict(self) -> dict:
        entries = []
        for key, entry in self.entries.items():
            entries.append({
                "key": key.as_str(),
                "origin": [list(p) for p in entry.plan.origin],
                "moves": [[GridAction(a).name for a in joint] for joint in entry.plan.moves],
                "performance": entry.plan.performance,
                "transcript_ref": entry.plan.transcript_ref,
                "llm_perf_samples": list(entry.llm_perf_samples),
            })
        return {"version": CACHE_FORMAT_VERSION, "entries": entries}

    @classmethod
    def from_dict(cls, data: dict) -> "PlanCache":
        if data.get("version") != CACHE_FORMAT_VERSION:
            raise ValueError(f"unsupported plan cache version {data.get('version')!r}")
        cache = cls()
        for rec in data["entries"]:
            plan = Plan(
                origin=tuple(tuple(p) for p in rec["origin"]),
                moves=tuple(tuple(GridAction[a] for a in joint) for joint in rec["moves"]),
                performance=rec["performance"],
                transcript_ref=rec["transcript_ref"],
            )
            cache.entries[StateKey.from_str(rec["key"])] = CacheEntry(plan, list(rec["llm_perf_samples"]))
        return cache

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "PlanCache":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
