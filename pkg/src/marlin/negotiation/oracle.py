"""Joint-BFS negotiator used as a deterministic stand-in for a language model."""

from __future__ import annotations

import re
from functools import lru_cache

from marlin.gridworld import GridAction, GridMap, apply_delta, resolve_moves
from marlin.negotiation.backends import BackendError, ChatBackend
from marlin.negotiation.protocol import FormatError, parse_moves, parse_state_block, render_moves
from marlin.search import joint_bfs


class OracleBackend(ChatBackend):
    """Negotiator that proposes optimal moves found by joint-state BFS.

    It reads the latest state block in the conversation, agrees with any
    proposal that is a first step of some optimal joint plan, and otherwise
    counter-proposes its own optimal move.  Stateless and deterministic; it
    stands in for a language model in tests and offline experiments.
    """

    def complete(self, messages):
        system = next((m.content for m in messages if m.role == "system"), "")
        me = re.search(r"You are agent (\d+)", system)
        if me is None:
            raise BackendError("oracle could not find its agent id in the system prompt")
        state_idx, info = None, None
        for i in range(len(messages) - 1, -1, -1):
            info = parse_state_block(messages[i].content)
            if info is not None:
                state_idx = i
                break
        if info is None:
            raise BackendError("oracle could not find a state block")
        n = len(info["positions"])
        plan = _solve(info["width"], info["height"], info["walls"], info["positions"], info["goals"])
        if not plan:
            best = ("W",) * n
            remaining = 0
        else:
            best = tuple(a.name for a in plan[0])
            remaining = len(plan)
        proposal = None
        for m in messages[state_idx + 1:]:
            if m.role != "other":
                continue
            try:
                proposal = parse_moves(m.content, n)
            except FormatError:
                continue
        if proposal is not None and _is_optimal_first_move(info, proposal, remaining):
            return "AGREE. That move keeps us on a shortest joint plan.\n" + render_moves(proposal)
        actions = [GridAction[a] for a in best]
        tlp = (
            f"TLP: {remaining} joint moves remain on a shortest plan; "
            "one robot steps aside where the corridor allows and the other passes."
        )
        prefix = "I suggest a different move. " if proposal is not None else ""
        return f"{prefix}{tlp}\n{render_moves(actions)}"


@lru_cache(maxsize=65536)
def _solve(width, height, walls, positions, goals):
    grid = GridMap(width, height, walls)
    plan = joint_bfs(grid, positions, goals)
    return tuple(plan) if plan is not None else None


def _is_optimal_first_move(info, proposal, remaining) -> bool:
    if remaining == 0:
        return all(a.name == "W" for a in proposal)
    grid = GridMap(info["width"], info["height"], info["walls"])
    targets = [apply_delta(p, a) for p, a in zip(info["positions"], proposal)]
    nxt, _ = resolve_moves(info["positions"], targets, grid.is_free)
    rest = _solve(info["width"], info["height"], info["walls"], tuple(nxt), info["goals"])
    return rest is not None and len(rest) == remaining - 1
