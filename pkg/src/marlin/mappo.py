"""Two-agent MAPPO: a parameter-shared actor and a centralized critic.

The actor maps an agent's ``(x, y, x_g, y_g)`` observation to five action
logits.  The critic sees the agent's own observation, the other agent's
observation and the other agent's one-hot action (13 inputs).  The critic is
only used to form advantages; acting needs the actor alone.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from marlin import nn
from marlin.gridworld import N_ACTIONS, GridAction, GridWorld, JointState, Observation, observe

ACTOR_SIZES = (4, 256, 256, N_ACTIONS)
CRITIC_SIZES = (13, 16, 1)


class NonFiniteLoss(FloatingPointError):
    pass


class GeneratorKind(str, enum.Enum):
    ADS = "ADS"
    IAN = "IAN"


@dataclass
class ActorCritic:
    """Shared actor, centralized critic and their optimizers.

    ``obs_scale`` multiplies raw grid coordinates before they enter either
    network.
    """

    actor: nn.MlpParams
    critic: nn.MlpParams
    actor_opt: nn.AdamState
    critic_opt: nn.AdamState
    obs_scale: float = 1.0

    def __post_init__(self):
        if self.actor.sizes[0] != 4 or self.actor.sizes[-1] != N_ACTIONS:
            raise nn.InvalidShape(f"actor must map 4 -> {N_ACTIONS}, got {self.actor.sizes}")
        if self.critic.sizes[0] != 13 or self.critic.sizes[-1] != 1:
            raise nn.InvalidShape(f"critic must map 13 -> 1, got {self.critic.sizes}")


def init_actor_critic(seed: int, lr: float = 3e-4, obs_scale: float = 1.0, critic_lr: float | None = None,
                      actor_sizes=ACTOR_SIZES, critic_sizes=CRITIC_SIZES) -> ActorCritic:
    ss = np.random.SeedSequence(seed)
    a_seed, c_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    actor = nn.mlp_init(actor_sizes, a_seed)
    critic = nn.mlp_init(critic_sizes, c_seed)
    critic_lr = lr if critic_lr is None else critic_lr
    return ActorCritic(actor, critic, nn.adam_init(actor, lr=lr), nn.adam_init(critic, lr=critic_lr), obs_scale=obs_scale)


def world_obs_scale(world: GridWorld) -> float:
    return 1.0 / max(world.width, world.height)


@dataclass(frozen=True)
class PpoConfig:
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    epochs: int = 4
    minibatch: int = 64
    ent_coef: float = 0.01
    vf_coef: float = 0.5

    def __post_init__(self):
        if not 0 < self.clip < 1:
            raise ValueError("clip must lie in (0, 1)")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0 <= self.lam <= 1:
            raise ValueError("lam must lie in [0, 1]")
        if self.epochs < 1 or self.minibatch < 1:
            raise ValueError("epochs and minibatch must be positive")


def one_hot(action: int) -> np.ndarray:
    v = np.zeros(N_ACTIONS)
    v[int(action)] = 1.0
    return v


def critic_input(own: Observation, other: Observation, other_action: GridAction) -> np.ndarray:
    return np.concatenate([np.asarray(own, dtype=np.float64), np.asarray(other, dtype=np.float64), one_hot(other_action)])


def _critic_batch(obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Critic rows for every agent of a two-agent step: ``obs`` is (2, 4)."""
    rows = []
    for i in range(2):
        j = 1 - i
        rows.append(np.concatenate([obs[i], obs[j], one_hot(actions[j])]))
    return np.stack(rows)


def joint_observation(world: GridWorld, state: JointState) -> np.ndarray:
    return np.array([observe(world, state, i) for i in range(world.n_agents)], dtype=np.float64)


def actor_input(model: ActorCritic, obs: np.ndarray) -> np.ndarray:
    return np.asarray(obs, dtype=np.float64) * model.obs_scale


def critic_features(model: ActorCritic, rows: np.ndarray) -> np.ndarray:
    x = np.array(rows, dtype=np.float64)
    x[..., :8] *= model.obs_scale
    return x


def policy_logits(model: ActorCritic, obs: np.ndarray) -> np.ndarray:
    return nn.forward(model.actor, actor_input(model, obs))


def critic_values(model: ActorCritic, rows: np.ndarray) -> np.ndarray:
    """Critic estimates for unscaled 13-wide critic rows."""
    return nn.forward(model.critic, critic_features(model, rows))[:, 0]


def evaluate_actions(model: ActorCritic, obs: np.ndarray, actions) -> tuple[np.ndarray, np.ndarray]:
    """Policy log-probabilities and critic values for a given joint action."""
    actions = np.asarray([int(a) for a in actions])
    logp = nn.log_softmax(policy_logits(model, obs))
    values = critic_values(model, _critic_batch(obs, actions))
    return logp[np.arange(len(actions)), actions], values


def g_ads(world: GridWorld, state: JointState, model: ActorCritic, rng: np.random.Generator, greedy: bool = False):
    """Action-distribution sampling: ``[(action, log_prob, value)]`` per agent.

    All actions are sampled first; each agent's value then conditions on the
    other agent's sampled action.
    """
    obs = joint_observation(world, state)
    logits = policy_logits(model, obs)
    logp = nn.log_softmax(logits)
    if greedy:
        actions = [int(np.argmax(row)) for row in logits]
    else:
        actions = [nn.categorical_sample(row, rng)[0] for row in logits]
    values = critic_values(model, _critic_batch(obs, np.array(actions)))
    return [(GridAction(a), float(logp[i, a]), float(values[i])) for i, a in enumerate(actions)]


@dataclass
class Trajectory:
    """Per-step joint records; column ``i`` of each array belongs to agent ``i``."""

    obs: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    values: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    tags: list = field(default_factory=list)

    def append(self, obs, actions, log_probs, values, rewards, done: bool, tag: GeneratorKind) -> None:
        lp = np.asarray(log_probs, dtype=np.float64)
        v = np.asarray(values, dtype=np.float64)
        if not (np.isfinite(lp).all() and np.isfinite(v).all()):
            raise ValueError("log_prob and value must be finite")
        self.obs.append(np.asarray(obs, dtype=np.float64))
        self.actions.append(np.asarray([int(a) for a in actions]))
        self.log_probs.append(lp)
        self.values.append(v)
        self.rewards.append(np.asarray(rewards, dtype=np.float64))
        self.dones.append(bool(done))
        self.tags.append(GeneratorKind(tag))

    def __len__(self) -> int:
        return len(self.dones)

    def agent(self, i: int) -> list[tuple]:
        """Records of one agent as ``(obs, action, log_prob, value, reward, done)``."""
        return [
            (Observation(*map(int, self.obs[t][i])), GridAction(int(self.actions[t][i])),
             float(self.log_probs[t][i]), float(self.values[t][i]), float(self.rewards[t][i]), self.dones[t])
            for t in range(len(self))
        ]

    def records(self, episode: int):
        for t in range(len(self)):
            for i in range(len(self.actions[t])):
                yield {
                    "episode": episode,
                    "step": t,
                    "agent": i,
                    "obs": [int(v) for v in self.obs[t][i]],
                    "action": GridAction(int(self.actions[t][i])).name,
                    "log_prob": float(self.log_probs[t][i]),
                    "value": float(self.values[t][i]),
                    "reward": float(self.rewards[t][i]),
                    "generator_tag": self.tags[t].value,
                }


def compute_gae(traj: Trajectory, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Raw GAE advantages and returns, each of shape ``(T, n_agents)``.

    The value after a ``done`` step (and after the final step) is taken as 0.
    """
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    rewards = np.stack(traj.rewards)
    values = np.stack(traj.values)
    dones = np.asarray(traj.dones, dtype=np.float64)
    T = len(traj)
    adv = np.zeros_like(rewards)
    gae = np.zeros(rewards.shape[1])
    for t in range(T - 1, -1, -1):
        live = 1.0 - dones[t]
        next_v = values[t + 1] if t + 1 < T else np.zeros(rewards.shape[1])
        if t + 1 == T:
            live = 0.0
        delta = rewards[t] + gamma * next_v * live - values[t]
        gae = delta + gamma * lam * live * gae
        adv[t] = gae
    return adv, adv + values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    return (adv - adv.mean()) / max(std, 1e-8)


def policy_head(actions: np.ndarray, old_logp: np.ndarray, adv: np.ndarray, clip: float, ent_coef: float, stats: dict | None = None):
    """Negated clipped-surrogate objective plus entropy bonus, as a loss head."""

    def head(logits: np.ndarray):
        B = logits.shape[0]
        logp_all = nn.log_softmax(logits)
        p = np.exp(logp_all)
        idx = np.arange(B)
        logp = logp_all[idx, actions]
        ratio = np.exp(logp - old_logp)
        clipped = np.clip(ratio, 1 - clip, 1 + clip)
        unclipped_obj = ratio * adv
        clipped_obj = clipped * adv
        obj = np.minimum(unclipped_obj, clipped_obj)
        entropy = -(p * logp_all).sum(axis=1)
        loss = -obj.mean() - ent_coef * entropy.mean()
        if stats is not None:
            stats["ratio"] = ratio
            stats["objective"] = obj
        d_logp = np.where(unclipped_obj <= clipped_obj, unclipped_obj, 0.0)
        onehot = np.zeros_like(p)
        onehot[idx, actions] = 1.0
        d_surr = d_logp[:, None] * (onehot - p)
        d_ent = -p * (logp_all + entropy[:, None])
        return loss, (-d_surr - ent_coef * d_ent) / B

    return head


def value_head(returns: np.ndarray, vf_coef: float):
    def head(out: np.ndarray):
        err = out[:, 0] - returns
        loss = vf_coef * float(np.mean(err**2))
        return loss, (2.0 * vf_coef * err / len(err))[:, None]

    return head


def ppo_update(model: ActorCritic, traj: Trajectory, cfg: PpoConfig, rng: np.random.Generator, info: dict | None = None) -> ActorCritic:
    """Clipped-surrogate update over the whole trajectory, regardless of generator tags.

    Stored log-probabilities form the importance ratio; for negotiated steps
    these are the policy's own log-probabilities of the negotiated action.
    Raises :class:`NonFiniteLoss` without touching ``model``.
    """
    if len(traj) == 0:
        return model
    adv, returns = compute_gae(traj, cfg.gamma, cfg.lam)
    adv = normalize_advantages(adv)
    obs = np.stack(traj.obs)                 # (T, n, 4)
    actions = np.stack(traj.actions)          # (T, n)
    T, n = actions.shape
    actor_x = actor_input(model, obs.reshape(T * n, 4))
    critic_x = critic_features(model, np.concatenate([_critic_batch(obs[t], actions[t]) for t in range(T)]))
    flat_actions = actions.reshape(-1)
    old_logp = np.stack(traj.log_probs).reshape(-1)
    flat_adv = adv.reshape(-1)
    flat_ret = returns.reshape(-1)

    actor, critic = model.actor, model.critic
    actor_opt, critic_opt = model.actor_opt, model.critic_opt
    N = len(flat_actions)
    first_ratio = None
    policy_losses, value_losses = [], []
    for _ in range(cfg.epochs):
        order = rng.permutation(N)
        for start in range(0, N, cfg.minibatch):
            mb = order[start:start + cfg.minibatch]
            stats: dict = {}
            p_loss, p_grad = nn.value_and_grad(
                actor, actor_x[mb],
                policy_head(flat_actions[mb], old_logp[mb], flat_adv[mb], cfg.clip, cfg.ent_coef, stats),
            )
            v_loss, v_grad = nn.value_and_grad(critic, critic_x[mb], value_head(flat_ret[mb], cfg.vf_coef))
            if not (np.isfinite(p_loss) and np.isfinite(v_loss)):
                raise NonFiniteLoss(f"policy loss {p_loss}, value loss {v_loss}")
            if first_ratio is None:
                first_ratio = stats["ratio"].copy()
            actor, actor_opt = nn.adam_step(actor, p_grad, actor_opt)
            critic, critic_opt = nn.adam_step(critic, v_grad, critic_opt)
            policy_losses.append(p_loss)
            value_losses.append(v_loss)
    if info is not None:
        info["first_ratio"] = first_ratio
        info["policy_loss"] = policy_losses
        info["value_loss"] = value_losses
    return replace(model, actor=actor, critic=critic, actor_opt=actor_opt, critic_opt=critic_opt)


def value_mse(model: ActorCritic, traj: Trajectory, cfg: PpoConfig) -> float:
    _, returns = compute_gae(traj, cfg.gamma, cfg.lam)
    obs = np.stack(traj.obs)
    actions = np.stack(traj.actions)
    x = np.concatenate([_critic_batch(obs[t], actions[t]) for t in range(len(traj))])
    v = critic_values(model, x)
    return float(np.mean((v - returns.reshape(-1)) ** 2))


def save_model(path_or_file, model: ActorCritic) -> None:
    named = {}
    named.update(nn.params_to_arrays("actor", model.actor))
    named.update(nn.params_to_arrays("critic", model.critic))
    meta = {}
    for prefix, opt in (("actor_opt", model.actor_opt), ("critic_opt", model.critic_opt)):
        arrays, m = nn.adam_to_arrays(prefix, opt)
        named.update(arrays)
        meta.update(m)
    named["obs_scale"] = np.array(model.obs_scale)
    nn.save_arrays(path_or_file, named, meta)


def load_model(path_or_file) -> ActorCritic:
    named, meta = nn.load_arrays(path_or_file)
    return ActorCritic(
        nn.params_from_arrays("actor", named),
        nn.params_from_arrays("critic", named),
        nn.adam_from_arrays("actor_opt", named, meta),
        nn.adam_from_arrays("critic_opt", named, meta),
        float(named["obs_scale"]),
    )
