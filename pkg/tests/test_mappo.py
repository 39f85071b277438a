import io

import numpy as np
import pytest

from marlin import mappo, nn
from marlin.gridworld import GridAction, JointState, load_builtin
from marlin.mappo import GeneratorKind, PpoConfig, Trajectory
from oracles import discounted_advantages, softmax_ref

ADS, IAN = GeneratorKind.ADS, GeneratorKind.IAN
BANDIT_STATES = (
    np.array([[0.0, 1.0, 4.0, 1.0], [4.0, 1.0, 0.0, 1.0]]),
    np.array([[1.0, 1.0, 3.0, 1.0], [3.0, 1.0, 1.0, 1.0]]),
)


def bandit_batch(model, rng, steps=32):
    """One-step episodes: action 1 pays +1, everything else pays 0."""
    traj = Trajectory()
    for k in range(steps):
        obs = BANDIT_STATES[k % 2]
        logits = mappo.policy_logits(model, obs)
        actions = [nn.categorical_sample(row, rng)[0] for row in logits]
        logp, values = mappo.evaluate_actions(model, obs, actions)
        traj.append(obs, actions, logp, values, [1.0 if a == 1 else 0.0 for a in actions], True, ADS)
    return traj


def bandit_p_optimal(model):
    return mappo.nn.softmax(mappo.policy_logits(model, np.vstack(BANDIT_STATES)))[:, 1]


def random_traj(rng, T=12, done_at_end=True, tags=(ADS,)):
    traj = Trajectory()
    for t in range(T):
        obs = rng.integers(0, 5, size=(2, 4)).astype(float)
        traj.append(obs, rng.integers(0, 5, size=2), -rng.random(2) - 0.1, rng.normal(size=2), rng.normal(size=2),
                    done_at_end and t == T - 1, tags[t % len(tags)])
    return traj


def test_critic_input_layout():
    x = mappo.critic_input((0, 1, 4, 1), (4, 1, 0, 1), GridAction.W)
    assert x.tolist() == [0, 1, 4, 1, 4, 1, 0, 1, 1, 0, 0, 0, 0]
    for a in GridAction:
        x = mappo.critic_input((0, 0, 0, 0), (0, 0, 0, 0), a)
        assert len(x) == 13 and x[8:].sum() == 1.0 and x[8 + int(a)] == 1.0


def test_actor_critic_shapes_are_enforced():
    model = mappo.init_actor_critic(0)
    assert model.actor.sizes == [4, 256, 256, 5]
    assert model.critic.sizes == [13, 16, 1]
    with pytest.raises(nn.InvalidShape):
        mappo.ActorCritic(model.critic, model.critic, model.actor_opt, model.critic_opt)


def test_ppo_config_validation():
    for bad in (dict(clip=0.0), dict(clip=1.0), dict(gamma=0.0), dict(gamma=1.5), dict(lam=-0.1), dict(lam=1.1)):
        with pytest.raises(ValueError):
            PpoConfig(**bad)


def test_g_ads_uniform_at_init_and_deterministic():
    world = load_builtin("single_slot")
    model = mappo.init_actor_critic(0)
    state = world.initial_state()
    rng = np.random.default_rng(0)
    counts = np.zeros(5)
    for _ in range(25_000):
        for a, _, _ in mappo.g_ads(world, state, model, rng):
            counts[int(a)] += 1
    assert np.all(np.abs(counts / counts.sum() - 0.2) < 0.015)
    a = mappo.g_ads(world, state, model, np.random.default_rng(5))
    b = mappo.g_ads(world, state, model, np.random.default_rng(5))
    assert a == b


def test_g_ads_log_probs_and_values_are_consistent():
    world = load_builtin("maze")
    model = mappo.init_actor_critic(3)
    state = JointState(((1, 1), (6, 2)))
    out = mappo.g_ads(world, state, model, np.random.default_rng(1))
    obs = mappo.joint_observation(world, state)
    logits = mappo.policy_logits(model, obs)
    for i, (a, lp, v) in enumerate(out):
        assert abs(lp - np.log(softmax_ref(list(logits[i]))[int(a)])) < 1e-12
        row = mappo.critic_input(obs[i], obs[1 - i], out[1 - i][0])
        assert v == pytest.approx(mappo.critic_values(model, row[None])[0], abs=1e-14)


def test_shared_actor_gives_identical_outputs_for_identical_observations():
    model = mappo.init_actor_critic(1)
    obs = np.array([[1.0, 1.0, 3.0, 1.0], [1.0, 1.0, 3.0, 1.0]])
    logits = mappo.policy_logits(model, obs)
    assert np.array_equal(logits[0], logits[1])


def test_gae_base_cases():
    traj = Trajectory()
    traj.append(np.zeros((2, 4)), [0, 0], [-1.0, -1.0], [0.3, -0.2], [1.0, 0.5], True, ADS)
    adv, ret = mappo.compute_gae(traj, 0.99, 0.95)
    assert np.allclose(adv[0], [1.0 - 0.3, 0.5 + 0.2])
    assert np.allclose(ret[0], [1.0, 0.5])

    rng = np.random.default_rng(0)
    traj = random_traj(rng, T=6)
    adv, _ = mappo.compute_gae(traj, 0.9, 0.0)
    r, v = np.stack(traj.rewards), np.stack(traj.values)
    for t in range(6):
        nxt = v[t + 1] if t < 5 else 0.0
        assert np.allclose(adv[t], r[t] + 0.9 * nxt - v[t], atol=1e-14)


def test_gae_lambda_one_matches_monte_carlo_oracle():
    traj = random_traj(np.random.default_rng(1), T=5)
    adv, ret = mappo.compute_gae(traj, 0.97, 1.0)
    r, v = np.stack(traj.rewards), np.stack(traj.values)
    for i in range(2):
        want = discounted_advantages(list(r[:, i]), list(v[:, i]), 0.97)
        assert np.max(np.abs(adv[:, i] - want)) < 1e-12
    assert np.allclose(ret, adv + v, atol=0)


def test_normalized_advantages_and_std_guard():
    adv = mappo.normalize_advantages(np.random.default_rng(2).normal(3.0, 5.0, size=(10, 2)))
    assert abs(adv.mean()) < 1e-12 and abs(adv.std() - 1.0) < 1e-12
    flat = mappo.normalize_advantages(np.full((4, 2), 7.0))
    assert np.all(flat == 0.0)


def test_empty_trajectory():
    with pytest.raises(ValueError):
        mappo.compute_gae(Trajectory(), 0.99, 0.95)
    model = mappo.init_actor_critic(0)
    assert mappo.ppo_update(model, Trajectory(), PpoConfig(), np.random.default_rng(0)) is model


def test_trajectory_rejects_non_finite_records():
    traj = Trajectory()
    with pytest.raises(ValueError):
        traj.append(np.zeros((2, 4)), [0, 0], [np.nan, 0.0], [0.0, 0.0], [0.0, 0.0], False, ADS)
    with pytest.raises(ValueError):
        traj.append(np.zeros((2, 4)), [0, 0], [0.0, 0.0], [np.inf, 0.0], [0.0, 0.0], False, ADS)


def test_ratio_identity_on_first_minibatch():
    model = mappo.init_actor_critic(4)
    world = load_builtin("single_slot")
    rng = np.random.default_rng(4)
    traj = Trajectory()
    state = world.initial_state()
    for t in range(20):
        out = mappo.g_ads(world, state, model, rng)
        obs = mappo.joint_observation(world, state)
        from marlin.gridworld import step
        res = step(world, state, [a for a, _, _ in out])
        traj.append(obs, [a for a, _, _ in out], [lp for _, lp, _ in out], [v for _, _, v in out], res.rewards, res.done,
                    IAN if t % 3 == 0 else ADS)
        state = res.next_state
    info = {}
    mappo.ppo_update(model, traj, PpoConfig(), rng, info)
    assert np.max(np.abs(info["first_ratio"] - 1.0)) < 1e-10


def test_clipping_bound_on_objective():
    rng = np.random.default_rng(5)
    actions = rng.integers(0, 5, 64)
    old = np.log(rng.uniform(0.05, 0.9, 64))
    adv = rng.normal(size=64)
    stats = {}
    head = mappo.policy_head(actions, old, adv, 0.2, 0.0, stats)
    head(rng.normal(scale=3.0, size=(64, 5)))
    bound = np.maximum(1.2 * adv, 0.8 * adv)
    assert np.all(stats["objective"] <= bound + 1e-10)


def test_policy_head_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    actions = rng.integers(0, 5, 8)
    logits = rng.normal(size=(8, 5))
    old = nn.log_softmax(logits + rng.normal(scale=0.1, size=(8, 5)))[np.arange(8), actions]
    head = mappo.policy_head(actions, old, rng.normal(size=8), 0.2, 0.05)
    _, grad = head(logits)
    h = 1e-6
    for idx in np.ndindex(logits.shape):
        up, down = logits.copy(), logits.copy()
        up[idx] += h
        down[idx] -= h
        num = (head(up)[0] - head(down)[0]) / (2 * h)
        assert abs(num - grad[idx]) < 1e-6


def test_zero_advantages_leave_only_entropy_and_value_terms():
    actions = np.array([0, 1, 2])
    logits = np.random.default_rng(7).normal(size=(3, 5))
    old = nn.log_softmax(logits)[np.arange(3), actions]
    _, g = mappo.policy_head(actions, old, np.zeros(3), 0.2, 0.0)(logits)
    assert not g.any()


def test_value_regression_mostly_decreases():
    rng = np.random.default_rng(8)
    traj = random_traj(rng, T=20)
    model = mappo.init_actor_critic(8)
    cfg = PpoConfig(ent_coef=0.0)
    errs = [mappo.value_mse(model, traj, cfg)]
    for _ in range(100):
        model = mappo.ppo_update(model, traj, cfg, rng)
        errs.append(mappo.value_mse(model, traj, cfg))
    assert sum(b < a for a, b in zip(errs, errs[1:])) >= 90


def test_mixed_generator_tags_are_treated_alike():
    a = random_traj(np.random.default_rng(9), tags=(ADS,))
    b = random_traj(np.random.default_rng(9), tags=(IAN, ADS))
    m = mappo.init_actor_critic(9)
    ua = mappo.ppo_update(m, a, PpoConfig(), np.random.default_rng(0))
    ub = mappo.ppo_update(m, b, PpoConfig(), np.random.default_rng(0))
    for x, y in zip(ua.actor.arrays(), ub.actor.arrays()):
        assert np.array_equal(x, y)


def test_non_finite_loss_aborts_without_touching_model():
    traj = random_traj(np.random.default_rng(10))
    traj.rewards[0] = np.array([np.inf, 0.0])
    model = mappo.init_actor_critic(10)
    before = [a.copy() for a in model.actor.arrays()]
    with pytest.raises((mappo.NonFiniteLoss, FloatingPointError)):
        with np.errstate(invalid="ignore"):
            mappo.ppo_update(model, traj, PpoConfig(), np.random.default_rng(0))
    assert all(np.array_equal(x, y) for x, y in zip(before, model.actor.arrays()))


def test_bandit_converges_to_paying_arm():
    model = mappo.init_actor_critic(0)
    rng = np.random.default_rng(0)
    for _ in range(300):
        model = mappo.ppo_update(model, bandit_batch(model, rng), PpoConfig(), rng)
    assert np.all(bandit_p_optimal(model) > 0.95)


def test_model_checkpoint_round_trip():
    model = mappo.init_actor_critic(11, obs_scale=0.2)
    model = mappo.ppo_update(model, random_traj(np.random.default_rng(11)), PpoConfig(), np.random.default_rng(0))
    buf = io.BytesIO()
    mappo.save_model(buf, model)
    buf.seek(0)
    back = mappo.load_model(buf)
    for x, y in zip(model.actor.arrays() + model.critic.arrays(), back.actor.arrays() + back.critic.arrays()):
        assert x.tobytes() == y.tobytes()
    assert back.obs_scale == 0.2 and back.actor_opt.t == model.actor_opt.t
