"""Policy sampling alone versus sampling mixed with negotiated plans.

A short sweep on the single-slot corridor: each seed is trained once with
plain MAPPO and once in hybrid mode, where early episodes follow negotiated
plans from the oracle backend and later ones switch between the two sources
based on recent performance.  Takes under a minute.

Run with ``python demos/03_training_comparison.py``.
"""

# %%
import numpy as np

from marlin.gridworld import load_builtin
from marlin.harness import CurveSummary, paired_test
from marlin.negotiation import OracleBackend
from marlin.trainer import TrainerConfig, run_training

world = load_builtin("single_slot")
SEEDS, EPISODES = range(3), 200

runs = {"marlin": {}, "mappo": {}}
for seed in SEEDS:
    for mode in runs:
        backends = [OracleBackend(), OracleBackend()] if mode == "marlin" else []
        record = run_training(TrainerConfig(mode=mode, seed=seed, episode_max=EPISODES), world, backends)
        runs[mode][seed] = record.performances()
        print(f"seed {seed} {mode:6s}: mean performance {record.performances().mean():.3f}, "
              f"generator use {record.generator_usage()}")

# %% [markdown]
# Median learning curves across seeds, sampled every 25 episodes.

# %%
curves = {mode: CurveSummary.from_runs("single_slot", mode, r) for mode, r in runs.items()}
print("episode  " + "  ".join(f"{m:>8s}" for m in curves))
for ep in range(25, EPISODES + 1, 25):
    print(f"{ep:7d}  " + "  ".join(f"{c.at(ep)[1]:8.3f}" for c in curves.values()))

# %% [markdown]
# Paired comparison of the per-seed mean over all episodes.

# %%
res = paired_test(runs["marlin"], runs["mappo"], (0, EPISODES))
print(f"mean difference {res.mean_difference:.3f}, t = {res.statistic:.2f}, p = {res.p_value:.3g}, "
      f"sign test p = {res.sign_p_value:.3g}")
print("per-seed means:", {m: np.round([v.mean() for v in r.values()], 3).tolist() for m, r in runs.items()})
