"""Six agents random-walk a small maze and negotiate only inside corridors.

Run with ``python demos/04_swarm.py``.
"""

# %%
from marlin.gridworld import render
from marlin.negotiation import OracleBackend
from marlin.swarm import load_builtin_swarm, run_swarm

smap = load_builtin_swarm()
print(render(smap.grid, smap.starts))
print("exit:", smap.exit, " conflict zones:", [sorted(z) for z in smap.zones])
print("tick limit:", 10 * smap.bfs_bound())

# %%
result = run_swarm(smap, [OracleBackend(), OracleBackend()], seed=3)
print(f"finished: {result.all_exited} after {result.ticks} ticks")
print("exit tick per agent:", result.exit_ticks())

# %% [markdown]
# Snapshots every 10 ticks.  Agents that have left are not drawn.

# %%
for t in range(0, result.ticks + 1, 10):
    agents = result.history[t]
    cells = [a.position for a in agents if a.active]
    print(f"tick {t}: {len(cells)} agents on the map")
    print(render(smap.grid, cells))

# %% [markdown]
# Every negotiation happened between two agents standing in the same zone.

# %%
by_outcome = {}
for e in result.events:
    by_outcome[e.outcome] = by_outcome.get(e.outcome, 0) + 1
print("negotiations:", by_outcome)
for e in result.events[:5]:
    print(f"tick {e.tick} zone {e.zone} agents {e.pair} at {e.positions}: {[a.name for a in e.actions or ()]}")
