"""Corridor gridworlds: maps, simultaneous moves and optimal joint plans.

Run with ``python demos/01_corridor_basics.py``.
"""

# %% [markdown]
# Five built-in maps ship with the package.  Digits mark where each agent
# starts; the goal of agent k is the start of the other agent, so every map
# is a swap puzzle.

# %%
from marlin.gridworld import CANONICAL_SCENARIOS, GridAction, load_builtin, performance, render, step
from marlin.search import joint_bfs

for name in CANONICAL_SCENARIOS:
    world = load_builtin(name)
    print(f"{name}: {world.width}x{world.height}, goals {world.goals}")
    print(render(world, world.starts))
    print()

# %% [markdown]
# Moves are simultaneous.  Two agents walking into each other both bounce
# back and each is charged a collision penalty in its reward.

# %%
world = load_builtin("single_slot")
state = world.initial_state()
for _ in range(2):
    res = step(world, state, (GridAction.R, GridAction.L))
    state = res.next_state
    print(render(world, state.positions), "rewards", res.rewards, "collisions", res.collisions)
print("performance so far:", performance(world, state))

# %% [markdown]
# Searching the joint state space gives the shortest plan that gets both
# agents home.  In the single-slot corridor one agent has to duck into the
# side slot while the other passes.

# %%
plan = joint_bfs(world, world.starts, world.goals)
state = world.initial_state()
print(f"optimal joint plan: {len(plan)} moves")
for joint in plan:
    state = step(world, state, joint).next_state
    print(" ".join(a.name for a in joint))
    print(render(world, state.positions))
print("performance:", performance(world, state))
