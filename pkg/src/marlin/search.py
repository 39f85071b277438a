"""Exhaustive joint-state breadth-first search over the gridworld dynamics."""

from __future__ import annotations

import itertools
from collections import deque
from typing import Sequence

from marlin.gridworld import Cell, GridAction, apply_delta, resolve_moves


def successors(world, positions: tuple[Cell, ...]):
    """Yield ``(joint_action, next_positions)`` in a fixed lexicographic order."""
    n = len(positions)
    for joint in itertools.product(GridAction, repeat=n):
        targets = [apply_delta(p, a) for p, a in zip(positions, joint)]
        final, _ = resolve_moves(positions, targets, world.is_free)
        yield joint, tuple(final)


def joint_bfs(world, start: Sequence[Cell], goals: Sequence[Cell] | None = None, max_depth: int | None = None):
    """Shortest joint action sequence taking every agent to its goal.

    Returns a list of joint actions (empty when already solved) or ``None``
    when no solution exists within ``max_depth`` moves.  Ties are broken by
    the lexicographic action order, so the result is deterministic.
    """
    goals = tuple(tuple(g) for g in (world.goals if goals is None else goals))
    start = tuple(tuple(p) for p in start)
    if start == goals:
        return []
    parent: dict[tuple, tuple] = {start: (None, None)}
    queue = deque([(start, 0)])
    while queue:
        cur, depth = queue.popleft()
        if max_depth is not None and depth >= max_depth:
            continue
        for joint, nxt in successors(world, cur):
            if nxt in parent:
                continue
            parent[nxt] = (cur, joint)
            if nxt == goals:
                path = []
                node = nxt
                while parent[node][0] is not None:
                    prev, act = parent[node]
                    path.append(act)
                    node = prev
                return path[::-1]
            queue.append((nxt, depth + 1))
    return None

