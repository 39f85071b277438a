"""Hybrid training loop switching between policy sampling and negotiated plans.

Per episode the step-0 generator is chosen as follows:

* episodes ``[0, m)`` sample from the policy (ADS),
* episodes ``[m, 2m)`` follow negotiated plans (IAN),
* afterwards IAN is used if the cached plan for the start state is perfect,
  or if the recent mean performance is below the mean performance measured
  for negotiated plans from that state; otherwise ADS.

Halfway through an episode the generator may flip with probability
``toggle_prob``.  Whatever produced the actions, the trajectory feeds one PPO
update at the end of the episode.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from marlin import mappo
from marlin.gridworld import PERF_WEIGHT, STEP_MAX, GridAction, GridWorld, JointState, all_at_goals, performance, step
from marlin.mappo import ActorCritic, GeneratorKind, PpoConfig, Trajectory
from marlin.negotiation import BackendError, NegotiationConfig, Plan, make_plan, write_transcript
from marlin.plan_cache import PlanCache, state_key

log = logging.getLogger(__name__)

MODES = ("marlin", "mappo", "llm-only")


@dataclass(frozen=True)
class TrainerConfig:
    m: int = 10
    episode_max: int = 1600
    step_max: int = STEP_MAX
    toggle_prob: float = 0.1
    perf_buffer_len: int = 5
    seed: int = 0
    mode: str = "marlin"
    eval_start: int = 100
    eval_every: int = 250
    eval_episodes: int = 1
    eval_greedy: bool = True
    lr: float = 3e-4
    critic_lr: float | None = None
    scale_obs: bool = True
    ppo: PpoConfig = field(default_factory=PpoConfig)
    negotiation: NegotiationConfig = field(default_factory=NegotiationConfig)

    def __post_init__(self):
        if self.episode_max < 2 * self.m:
            raise ValueError("episode_max must be at least 2m")
        if not 0.0 <= self.toggle_prob <= 1.0:
            raise ValueError("toggle_prob must lie in [0, 1]")
        if self.perf_buffer_len < 1:
            raise ValueError("perf_buffer_len must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.negotiation.move_cap > self.step_max:
            raise ValueError("negotiation move_cap cannot exceed step_max")


class PerfBuffer:
    """Ring of the most recent episode performances."""

    def __init__(self, maxlen: int = 5):
        self._values: deque[float] = deque(maxlen=maxlen)

    def push(self, p: float) -> None:
        self._values.append(float(p))

    def mean(self) -> float | None:
        if not self._values:
            return None
        return sum(self._values) / len(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def values(self) -> list[float]:
        return list(self._values)


def select_generator(episode: int, m: int, p_plan: float | None, p_bar: float | None, p_llm_bar: float | None) -> GeneratorKind:
    if episode < m:
        return GeneratorKind.ADS
    if episode < 2 * m:
        return GeneratorKind.IAN
    if (p_plan if p_plan is not None else 0.0) == 1.0:
        return GeneratorKind.IAN
    # no negotiated samples yet: negotiate to gather some
    if p_llm_bar is None or p_bar is None:
        return GeneratorKind.IAN
    if p_bar < p_llm_bar:
        return GeneratorKind.IAN
    return GeneratorKind.ADS


def toggle(g: GeneratorKind) -> GeneratorKind:
    return GeneratorKind.IAN if g is GeneratorKind.ADS else GeneratorKind.ADS


def maybe_toggle(step_idx: int, step_max: int, g: GeneratorKind, rng: np.random.Generator, toggle_prob: float = 0.1) -> GeneratorKind:
    """Flip the generator with probability ``toggle_prob`` at the midpoint step only."""
    if step_idx != step_max // 2:
        return g
    return toggle(g) if rng.random() <= toggle_prob else g


@dataclass
class EpisodeLog:
    episode: int
    performance: float
    generator: str
    collisions: int
    steps: int
    ads_steps: int
    ian_steps: int
    toggled: bool
    plans_made: int
    p_bar: float | None
    events: list = field(default_factory=list)

    CSV_FIELDS = ("episode", "performance", "generator", "collisions", "steps", "ads_steps", "ian_steps",
                  "toggled", "plans_made", "p_bar")

    def row(self) -> dict:
        return {
            "episode": self.episode,
            "performance": repr(float(self.performance)),
            "generator": self.generator,
            "collisions": self.collisions,
            "steps": self.steps,
            "ads_steps": self.ads_steps,
            "ian_steps": self.ian_steps,
            "toggled": int(self.toggled),
            "plans_made": self.plans_made,
            "p_bar": "" if self.p_bar is None else repr(float(self.p_bar)),
        }


@dataclass
class TrainingRecord:
    config: TrainerConfig
    scenario_id: str
    episodes: list[EpisodeLog] = field(default_factory=list)
    evaluations: list[tuple[int, float]] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    model: ActorCritic | None = None

    def performances(self) -> np.ndarray:
        return np.array([e.performance for e in self.episodes])

    def generator_usage(self) -> dict[str, int]:
        out = {"ADS": 0, "IAN": 0}
        for e in self.episodes:
            out[e.generator] += 1
        return out

    def write_csv(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ep_path = out_dir / "episodes.csv"
        with open(ep_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=EpisodeLog.CSV_FIELDS)
            w.writeheader()
            for e in self.episodes:
                w.writerow(e.row())
        ev_path = out_dir / "evaluation.csv"
        with open(ev_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "performance"])
            for ep, perf in self.evaluations:
                w.writerow([ep, repr(float(perf))])
        return ep_path, ev_path


def read_episode_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class TrainerRngs:
    """Independent random streams so that, e.g., negotiation never perturbs sampling."""

    sample: np.random.Generator
    toggle: np.random.Generator
    shuffle: np.random.Generator
    leader: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "TrainerRngs":
        streams = np.random.SeedSequence(seed).spawn(4)
        return cls(*(np.random.default_rng(s) for s in streams))


def absorbing_goal_value(remaining: int, gamma: float, w: float = PERF_WEIGHT) -> float:
    """Discounted reward of waiting at the goals for the ``remaining`` capped steps.

    Success ends the episode early; without this value, finishing would
    forfeit the per-step progress reward and agents learn to stall.
    """
    if remaining <= 0:
        return 0.0
    if gamma == 1.0:
        return w * remaining
    return w * gamma * (1.0 - gamma**remaining) / (1.0 - gamma)


class _PlanCursor:
    """The plan being followed and where the live state is expected to be."""

    def __init__(self, plan: Plan, world: GridWorld):
        self.plan = plan
        self.index = 0
        self.expected = plan.predicted_positions(world)

    def next_action(self, positions) -> tuple | None:
        if self.index >= len(self.plan.moves) or tuple(positions) != self.expected[self.index]:
            return None
        joint = self.plan.moves[self.index]
        self.index += 1
        return joint


class Trainer:
    """Holds the mutable training state: model, cache, performance buffer and rngs."""

    def __init__(self, world: GridWorld, cfg: TrainerConfig, backends: Sequence = (), cache: PlanCache | None = None,
                 model: ActorCritic | None = None, transcript_path=None, trajectory_path=None):
        self.world = world
        self.cfg = cfg
        self.backends = list(backends)
        self.cache = cache if cache is not None else PlanCache()
        if model is None:
            scale = mappo.world_obs_scale(world) if cfg.scale_obs else 1.0
            model = mappo.init_actor_critic(cfg.seed, lr=cfg.lr, obs_scale=scale, critic_lr=cfg.critic_lr)
        self.model = model
        self.buffer = PerfBuffer(cfg.perf_buffer_len)
        self.rngs = TrainerRngs.from_seed(cfg.seed)
        self.transcript_path = transcript_path
        self.trajectory_path = trajectory_path
        self._sessions = 0

    # -- plans ---------------------------------------------------------------

    def _negotiate(self, state: JointState, episode: int) -> Plan:
        self._sessions += 1
        sid = f"{self.world.scenario_id}-s{self.cfg.seed}-e{episode}-n{self._sessions}"
        plan = make_plan(self.world, state, self.backends, self.cfg.negotiation, self.rngs.leader, session_id=sid)
        if self.transcript_path is not None:
            write_transcript(self.transcript_path, [(sid, plan.transcript)], mode="a")
        return plan

    def acquire_plan(self, state: JointState, episode: int, p_bar: float | None) -> tuple[Plan, bool]:
        """Cached plan for ``state``, renegotiated when missing or worse than ``p_bar``."""
        key = state_key(self.world, state)
        cached = self.cache.load_plan(key)
        fresh = self.cfg.mode == "llm-only"
        if cached is not None and not fresh and (p_bar is None or cached.performance >= p_bar):
            return cached, False
        plan = self._negotiate(state, episode)
        self.cache.store_plan(key, plan)
        best = self.cache.load_plan(key)
        return (plan if fresh else best), True

    # -- episodes ------------------------------------------------------------

    def initial_generator(self, episode: int, state: JointState, p_bar: float | None) -> GeneratorKind:
        if self.cfg.mode == "mappo":
            return GeneratorKind.ADS
        if self.cfg.mode == "llm-only":
            return GeneratorKind.IAN
        key = state_key(self.world, state)
        plan = self.cache.load_plan(key)
        p_plan = plan.performance if plan is not None else None
        return select_generator(episode, self.cfg.m, p_plan, p_bar, self.cache.llm_mean_perf(key))

    def run_episode(self, episode: int, start_state: JointState | None = None) -> tuple[EpisodeLog, Trajectory]:
        cfg, world = self.cfg, self.world
        state = start_state if start_state is not None else world.initial_state()
        state = JointState(state.positions, 0)
        p_bar = self.buffer.mean()
        g = self.initial_generator(episode, state, p_bar)
        log_entry = EpisodeLog(episode, 0.0, g.value, 0, 0, 0, 0, False, 0, p_bar)
        traj = Trajectory()
        cursor: _PlanCursor | None = None
        ian_disabled = False
        for t in range(cfg.step_max):
            if all_at_goals(world, state):
                break
            if cfg.mode == "marlin":
                g_new = maybe_toggle(t, cfg.step_max, g, self.rngs.toggle, cfg.toggle_prob)
                if g_new is not g:
                    log_entry.toggled = True
                    log_entry.events.append(f"toggle {g.value}->{g_new.value} at step {t}")
                    g = g_new
            if g is GeneratorKind.IAN and ian_disabled:
                g = GeneratorKind.ADS
            obs = mappo.joint_observation(world, state)
            joint = None
            tag = g
            if g is GeneratorKind.IAN:
                joint = cursor.next_action(state.positions) if cursor is not None else None
                if joint is None:
                    try:
                        plan, made = self.acquire_plan(state, episode, p_bar)
                    except BackendError as exc:
                        log.warning("negotiation failed in episode %d: %s; continuing with ADS", episode, exc)
                        log_entry.events.append(f"backend error at step {t}: {exc}")
                        ian_disabled = True
                        g = tag = GeneratorKind.ADS
                    else:
                        log_entry.plans_made += int(made)
                        cursor = _PlanCursor(plan, world)
                        joint = cursor.next_action(state.positions)
                        if joint is None:
                            # empty plan from a non-goal state (move_cap 0); nothing to follow
                            joint = (GridAction.W,) * world.n_agents
            if joint is None:
                sampled = mappo.g_ads(world, state, self.model, self.rngs.sample)
                joint = tuple(a for a, _, _ in sampled)
                logps = [lp for _, lp, _ in sampled]
                values = [v for _, _, v in sampled]
                tag = GeneratorKind.ADS
            else:
                logps, values = mappo.evaluate_actions(self.model, obs, joint)
            res = step(world, state, joint, step_max=cfg.step_max)
            rewards = res.rewards
            if res.done and all_at_goals(world, res.next_state):
                bonus = absorbing_goal_value(cfg.step_max - res.next_state.step_index, cfg.ppo.gamma)
                rewards = tuple(r + bonus for r in rewards)
            traj.append(obs, joint, logps, values, rewards, res.done, tag)
            log_entry.collisions += sum(res.collisions)
            if tag is GeneratorKind.IAN:
                log_entry.ian_steps += 1
            else:
                log_entry.ads_steps += 1
            state = res.next_state
            if res.done:
                break
        log_entry.steps = len(traj)
        log_entry.performance = performance(world, state)
        return log_entry, traj

    def train_episode(self, episode: int, start_state: JointState | None = None) -> EpisodeLog:
        entry, traj = self.run_episode(episode, start_state)
        self.buffer.push(entry.performance)
        if self.trajectory_path is not None and len(traj):
            with open(self.trajectory_path, "a") as fh:
                for rec in traj.records(episode):
                    fh.write(json.dumps(rec) + "\n")
        if self.cfg.mode != "llm-only" and len(traj):
            try:
                self.model = mappo.ppo_update(self.model, traj, self.cfg.ppo, self.rngs.shuffle)
            except (mappo.NonFiniteLoss, FloatingPointError) as exc:
                log.warning("skipping update in episode %d: %s", episode, exc)
                entry.events.append(f"update skipped: {exc}")
        return entry

    def evaluate(self, episodes: int | None = None, greedy: bool | None = None, rng: np.random.Generator | None = None) -> float:
        """Mean performance of policy-only rollouts; never touches training state."""
        episodes = self.cfg.eval_episodes if episodes is None else episodes
        greedy = self.cfg.eval_greedy if greedy is None else greedy
        rng = rng if rng is not None else np.random.default_rng([self.cfg.seed, 0xE7A1])
        return float(np.mean([evaluate_policy(self.world, self.model, self.cfg.step_max, greedy, rng) for _ in range(episodes)]))


def evaluate_policy(world: GridWorld, model: ActorCritic, step_max: int = STEP_MAX, greedy: bool = True,
                    rng: np.random.Generator | None = None) -> float:
    state = world.initial_state()
    rng = rng if rng is not None else np.random.default_rng(0)
    for _ in range(step_max):
        if all_at_goals(world, state):
            break
        joint = [a for a, _, _ in mappo.g_ads(world, state, model, rng, greedy=greedy)]
        res = step(world, state, joint, step_max=step_max)
        state = res.next_state
        if res.done:
            break
    return performance(world, state)


def train_episode(trainer: Trainer, episode: int, start_state: JointState | None = None):
    """Functional view: ``(model', episode_performance, episode_log)``."""
    entry = trainer.train_episode(episode, start_state)
    return trainer.model, entry.performance, entry


def is_eval_episode(cfg: TrainerConfig, completed: int) -> bool:
    """True once ``completed`` episodes are done and an evaluation is due."""
    if cfg.eval_every <= 0 or completed < cfg.eval_start:
        return False
    return (completed - cfg.eval_start) % cfg.eval_every == 0


def run_training(cfg: TrainerConfig, world: GridWorld, backends: Sequence = (), out_dir=None,
                 cache: PlanCache | None = None, trajectories: bool = True) -> TrainingRecord:
    """Train for ``cfg.episode_max`` episodes, evaluating on the configured cadence.

    With ``out_dir`` set, writes episode/evaluation CSVs, model checkpoints at
    each evaluation, negotiation transcripts, the plan cache and (unless
    ``trajectories`` is false) every step's trajectory record.
    """
    out = Path(out_dir) if out_dir is not None else None
    transcript_path = trajectory_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "checkpoints").mkdir(exist_ok=True)
        transcript_path = out / "transcripts.jsonl"
        transcript_path.write_text("")
        if trajectories:
            trajectory_path = out / "trajectories.jsonl"
            trajectory_path.write_text("")
    trainer = Trainer(world, cfg, backends, cache, transcript_path=transcript_path, trajectory_path=trajectory_path)
    record = TrainingRecord(cfg, world.scenario_id)
    for episode in range(cfg.episode_max):
        record.episodes.append(trainer.train_episode(episode))
        completed = episode + 1
        if is_eval_episode(cfg, completed):
            record.evaluations.append((completed, trainer.evaluate()))
            if out is not None:
                ck = out / "checkpoints" / f"model_{completed:05d}.npz"
                mappo.save_model(ck, trainer.model)
                record.checkpoints.append(str(ck))
    record.model = trainer.model
    if out is not None:
        record.write_csv(out)
        mappo.save_model(out / "model_final.npz", trainer.model)
        trainer.cache.save(out / "plan_cache.json")
    return record
