"""Independent reference implementations used only by the tests.

Nothing here imports from ``marlin``; each oracle re-derives its answer from
first principles so that agreement with the package is meaningful.
"""

from __future__ import annotations

import itertools
import math
from collections import deque

# action codes: W, F (north), B (south), L (west), R (east)
STEPS = {0: (0, 0), 1: (0, -1), 2: (0, 1), 3: (-1, 0), 4: (1, 0)}


def parse_grid(text: str):
    """Map text -> (width, height, walls, starts{k: cell}, goals{k: cell})."""
    block, _, meta = text.strip("\n").partition("\n\n")
    rows = block.split("\n")
    walls, starts = set(), {}
    for y, row in enumerate(rows):
        for x, ch in enumerate(row):
            if ch == "#":
                walls.add((x, y))
            elif ch in "0123456789":
                starts[int(ch)] = (x, y)
    goals = {}
    for line in meta.split("\n"):
        if line.startswith("goal."):
            key, val = line.split("=")
            gx, gy = val.split(",")
            goals[int(key.strip()[5:])] = (int(gx), int(gy))
    return len(rows[0]), len(rows), walls, starts, goals


def free(width, height, walls, cell) -> bool:
    x, y = cell
    return 0 <= x < width and 0 <= y < height and cell not in walls


def single_bfs(width, height, walls, start, goal):
    dist = {start: 0}
    q = deque([start])
    while q:
        c = q.popleft()
        if c == goal:
            return dist[c]
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            n = (c[0] + dx, c[1] + dy)
            if n not in dist and free(width, height, walls, n):
                dist[n] = dist[c] + 1
                q.append(n)
    return None


def resolve_by_subsets(positions, targets, is_free):
    """Final cells under the collision rules, found as the largest valid mover set.

    A set S of movers is valid when every member: targets a free cell, is the
    only agent aiming at that cell, is not in a head-on swap with another
    mover, and does not enter a cell whose occupant is outside S.  Validity
    is closed under union, so the largest valid set is unique.
    """
    n = len(positions)
    movers = [i for i in range(n) if targets[i] != positions[i]]

    def ok(S):
        for i in S:
            if not is_free(targets[i]):
                return False
            if any(j != i and j in movers and targets[j] == targets[i] for j in range(n)):
                return False
            if any(j in movers and targets[j] == positions[i] and targets[i] == positions[j] for j in range(n) if j != i):
                return False
            for j in range(n):
                if j != i and positions[j] == targets[i] and j not in S:
                    return False
        return True

    best = ()
    for r in range(len(movers), -1, -1):
        found = [S for S in itertools.combinations(movers, r) if ok(set(S))]
        if found:
            best = found[0]
            break
    S = set(best)
    final = [targets[i] if i in S else positions[i] for i in range(n)]
    blocked = [i in movers and i not in S for i in range(n)]
    return final, blocked


def joint_bfs_length(width, height, walls, starts, goals):
    """Optimal joint-plan length using the subset collision oracle."""
    is_free = lambda c: free(width, height, walls, c)  # noqa: E731
    start, goal = tuple(starts), tuple(goals)
    seen = {start: 0}
    q = deque([start])
    while q:
        s = q.popleft()
        if s == goal:
            return seen[s]
        for joint in itertools.product(range(5), repeat=len(s)):
            targets = [(p[0] + STEPS[a][0], p[1] + STEPS[a][1]) for p, a in zip(s, joint)]
            final, _ = resolve_by_subsets(list(s), targets, is_free)
            t = tuple(final)
            if t not in seen:
                seen[t] = seen[s] + 1
                q.append(t)
    return None


def softmax_ref(z):
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return [v / s for v in e]


def matmul_forward(weights, biases, x):
    """Plain-loop MLP forward pass: tanh hidden layers, identity output."""
    h = list(x)
    for k, (W, b) in enumerate(zip(weights, biases)):
        out = []
        for r in range(len(W)):
            acc = b[r]
            for c in range(len(h)):
                acc += W[r][c] * h[c]
            out.append(acc)
        h = [math.tanh(v) for v in out] if k < len(weights) - 1 else out
    return h


def discounted_advantages(rewards, values, gamma):
    """lambda = 1 advantages by direct summation; episode terminal at the end."""
    T = len(rewards)
    out = []
    for t in range(T):
        g = sum(gamma ** (k - t) * rewards[k] for k in range(t, T))
        out.append(g - values[t])
    return out


def median_by_sorting(values):
    s = sorted(values)
    n = len(s)
    if n % 2:
        return s[n // 2]
    return 0.5 * (s[n // 2 - 1] + s[n // 2])


def paired_t(a, b):
    d = [x - y for x, y in zip(a, b)]
    n = len(d)
    mean = sum(d) / n
    var = sum((v - mean) ** 2 for v in d) / (n - 1)
    return mean / math.sqrt(var / n)


def running_max(values):
    out, best = [], -math.inf
    for v in values:
        best = max(best, v)
        out.append(best)
    return out


def best_memoryless_performance(map_text: str, step_max: int = 50) -> float:
    """Best final performance any deterministic own-position-to-action policy pair can reach.

    Each agent's greedy policy sees only its own cell and its fixed goal, so it
    is a lookup table from cells to actions.  The search fills in table
    entries lazily, branching on all five actions the first time an agent
    stands on a cell, and simulates each completed rollout.
    """
    width, height, walls, starts, goals = parse_grid(map_text)
    n = len(starts)
    start = tuple(starts[k] for k in range(n))
    goal = tuple(goals[k] for k in range(n))
    dist0 = [abs(s[0] - g[0]) + abs(s[1] - g[1]) for s, g in zip(start, goal)]
    is_free = lambda c: free(width, height, walls, c)  # noqa: E731

    def perf(pos):
        return sum(max(0.0, 1 - (abs(p[0] - g[0]) + abs(p[1] - g[1])) / d) for p, g, d in zip(pos, goal, dist0)) / n

    best = 0.0
    stack = [(tuple({} for _ in range(n)), start, 0)]
    while stack:
        tables, pos, t = stack.pop()
        while t < step_max and pos != goal:
            missing = next((i for i in range(n) if pos[i] not in tables[i]), None)
            if missing is not None:
                for a in range(5):
                    branch = tuple(dict(tb) for tb in tables)
                    branch[missing][pos[missing]] = a
                    stack.append((branch, pos, t))
                break
            acts = [tables[i][pos[i]] for i in range(n)]
            targets = [(p[0] + STEPS[a][0], p[1] + STEPS[a][1]) for p, a in zip(pos, acts)]
            final, _ = resolve_by_subsets(list(pos), targets, is_free)
            pos, t = tuple(final), t + 1
        else:
            best = max(best, perf(pos))
    return best
