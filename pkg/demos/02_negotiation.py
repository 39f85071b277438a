"""Two agents negotiate a plan turn by turn.

The oracle backend stands in for a chat model: it reads the map out of the
conversation, proposes optimal moves in the shared grammar and agrees with
proposals that stay on a shortest joint plan.  Swap it for
``RemoteBackend.from_env()`` to talk to a real chat-completions endpoint.

Run with ``python demos/02_negotiation.py``.
"""

# %%
from marlin.gridworld import load_builtin
from marlin.negotiation import (
    NegotiationConfig,
    OracleBackend,
    ScriptedBackend,
    make_plan,
    negotiate_round,
    replay_plan,
)

world = load_builtin("single_slot")

# %% [markdown]
# One round: the leader (agent 0) proposes, the other agent answers.

# %%
actions, entries = negotiate_round(world, world.initial_state(), [OracleBackend(), OracleBackend()])
for e in entries:
    print(f"--- agent {e.speaker} ({e.kind})")
    print(e.content)
print("adopted:", [a.name for a in actions])

# %% [markdown]
# Malformed replies are sent back for correction and never reach the other
# agent.  Here agent 0 first answers in free prose.

# %%
backends = [
    ScriptedBackend(["Let me go north first.", "TLP: north.\nMOVE 0: @NORTH\nMOVE 1: @WAIT"]),
    ScriptedBackend(["AGREE\nMOVE 0: @NORTH\nMOVE 1: @WAIT"]),
]
actions, entries = negotiate_round(world, world.initial_state(), backends, NegotiationConfig())
print([(e.speaker, e.kind) for e in entries], "->", [a.name for a in actions])

# %% [markdown]
# A full plan repeats rounds, simulating the agreed moves and telling both
# agents the new positions, until everyone is home.  The transcript alone is
# enough to rebuild the plan.

# %%
plan = make_plan(world, world.initial_state(), [OracleBackend(), OracleBackend()], session_id="demo")
print(f"{len(plan.moves)} moves, performance {plan.performance}")
print("moves:", " ".join("/".join(a.name for a in joint) for joint in plan.moves))
print("replay matches:", replay_plan(plan.transcript, "demo") == plan)
