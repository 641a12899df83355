import math

import numpy as np
import pytest

from pdectrl.errors import ConfigError, NotReadyError
from pdectrl.numerics import Rng, derive_seed
from pdectrl.pde_env import EnvConfig, PdeEnv
from pdectrl.sac import (AgentNets, Batch, actor_loss_grads, ReplayBuffer, SacConfig, SacLearner, Transition,
                         build_agent, compute_target, critic_loss_grads, evaluate_controller,
                         metrics_csv, polyak_update, replay_push, replay_sample,
                         reward_curve_area, sac_train, summarize, target_value)

N = 11


def transition(k, n=N):
    return Transition(np.full(n, float(k)), float(k), -float(k), np.full(n, k + 0.5), False)


class TestReplay:
    def test_ring_eviction(self):
        buf = ReplayBuffer(3, N)
        for k in range(4):
            replay_push(buf, transition(k))
        assert len(buf) == 3
        assert [t.action for t in buf.items()] == [1.0, 2.0, 3.0]

    def test_with_replacement(self):
        buf = ReplayBuffer(10, N)
        replay_push(buf, transition(7))
        batch = replay_sample(buf, 4, Rng(0))
        np.testing.assert_array_equal(batch.action, [7.0] * 4)
        assert batch.state.shape == (4, N)

    def test_not_ready(self):
        buf = ReplayBuffer(10, N, min_size=5)
        replay_push(buf, transition(0))
        with pytest.raises(NotReadyError):
            replay_sample(buf, 1, Rng(0))

    def test_uniform_frequencies(self):
        buf = ReplayBuffer(10, N)
        for k in range(10):
            replay_push(buf, transition(k))
        idx = buf.sample_indices(100_000, Rng(1))
        counts = np.bincount(idx, minlength=10)
        sigma = math.sqrt(100_000 * 0.1 * 0.9)
        assert np.all(np.abs(counts - 10_000) <= 3 * sigma)

    def test_growth_preserves_order(self):
        buf = ReplayBuffer(3000, 2)
        for k in range(2500):
            buf.push(transition(k, 2))
        assert [t.action for t in buf.items()[:3]] == [0.0, 1.0, 2.0]
        assert buf.items()[-1].action == 2499.0


def tiny_agent(extractor="flatten", seed=0, **kw):
    cfg = SacConfig(extractor=extractor, actor_hidden=(8, 8), critic_hidden=(8, 8), batch_size=4,
                    warmup=4, seed=seed, **kw)
    rng = Rng(seed)
    return cfg, build_agent(cfg, N, 5.0, np.ones(N), rng, kind="hyperbolic"), rng


def random_batch(rng, m=6, done=None):
    return Batch(rng.normal((m, N)), rng.uniform(-5, 5, m), rng.normal(m), rng.normal((m, N)),
                 np.zeros(m) if done is None else np.asarray(done, dtype=float))


class TestTarget:
    def test_worked_example(self):
        assert target_value(1.0, 0.0, 2.0, 3.0, -1.0, 0.99, 0.2) == pytest.approx(3.178, abs=1e-12)

    def test_no_discount(self):
        cfg, nets, rng = tiny_agent(gamma_rl=0.0)
        batch = random_batch(rng)
        np.testing.assert_array_equal(compute_target(batch, nets, cfg, rng.normal(6)), batch.reward)

    def test_done_masks_bootstrap(self):
        cfg, nets, rng = tiny_agent()
        batch = random_batch(rng, done=np.ones(6))
        np.testing.assert_array_equal(compute_target(batch, nets, cfg, rng.normal(6)), batch.reward)

    def test_uses_targets_and_fresh_action(self):
        cfg, nets, rng = tiny_agent()
        batch = random_batch(rng)
        noise = rng.normal(6)
        sample, _ = nets.actor.sample(batch.next_state, noise)
        q1, _ = nets.target1.forward(batch.next_state, sample.action)
        q2, _ = nets.target2.forward(batch.next_state, sample.action)
        expected = [target_value(r, 0.0, a, b, lp, cfg.gamma_rl, cfg.alpha)
                    for r, a, b, lp in zip(batch.reward, q1, q2, sample.log_prob)]
        np.testing.assert_allclose(compute_target(batch, nets, cfg, noise), expected, atol=1e-12)

    def test_target_nets_untouched(self):
        cfg, nets, rng = tiny_agent()
        before = nets.param_digest("target1")
        compute_target(random_batch(rng), nets, cfg, rng.normal(6))
        assert nets.param_digest("target1") == before


class TestPolyak:
    def arrays(self, value):
        class Holder:
            params = [np.full(3, float(value))]
        return Holder()

    def test_tau_one(self):
        t, c = self.arrays(0.0), self.arrays(2.5)
        polyak_update([t], [c], 1.0)
        np.testing.assert_array_equal(t.params[0], 2.5)

    def test_small_tau(self):
        t, c = self.arrays(0.0), self.arrays(1.0)
        polyak_update([t], [c], 0.005)
        np.testing.assert_allclose(t.params[0], 0.005, rtol=1e-15)

    def test_geometric_convergence(self):
        t, c = self.arrays(0.0), self.arrays(1.0)
        errors = []
        for _ in range(50):
            polyak_update([t], [c], 0.1)
            errors.append(1.0 - t.params[0][0])
        ratios = np.array(errors[1:]) / np.array(errors[:-1])
        np.testing.assert_allclose(ratios, 0.9, rtol=1e-10)

    def test_both_critics(self):
        cfg, nets, _ = tiny_agent()
        for p in nets.critic2.params:
            p += 1.0
        polyak_update(nets.targets, nets.critics, 1.0)
        assert nets.param_digest("target2") == nets.param_digest("critic2")


class TestCriticUpdate:
    def test_exact_fit_has_zero_gradient(self):
        cfg, nets, rng = tiny_agent()
        batch = random_batch(rng)
        y, _ = nets.critic1.forward(batch.state, batch.action)
        loss, grads = critic_loss_grads(nets.critic1, batch, y)
        assert loss == 0.0
        assert all(not np.any(g) for g in grads)

    def test_single_item_chain_rule(self):
        cfg, nets, rng = tiny_agent()
        batch = random_batch(rng, m=1)
        critic = nets.critic1
        q, cache = critic.forward(batch.state, batch.action)
        y = q - 0.75
        _, grads = critic_loss_grads(critic, batch, y)
        # dL/dtheta = 2 (Q - y) dQ/dtheta with Q - y = 0.75
        dq, _ = critic.backward(cache, np.ones(1))
        for g, d in zip(grads, dq):
            np.testing.assert_allclose(g, 1.5 * d, rtol=1e-13, atol=1e-15)

    def test_loss_decreases(self):
        cfg, nets, rng = tiny_agent(critic_lr=1e-2)
        batch = random_batch(rng, m=32)
        learner = SacLearner(nets, cfg, Rng(1))
        y = np.ones(32)
        first = learner.critic_update(batch, y)[0]
        for _ in range(200):
            last = learner.critic_update(batch, y)[0]
        assert last < 0.1 * first


def constant_critic(critic, value):
    for p in critic.fc.params:
        p[...] = 0.0
    critic.fc.biases[-1][...] = value


class TestActorUpdate:
    def test_constant_critic_zero_alpha(self):
        cfg, nets, rng = tiny_agent(alpha=0.0)
        constant_critic(nets.critic1, 4.0)
        constant_critic(nets.critic2, 6.0)
        loss, grads = actor_loss_grads(nets, random_batch(rng), cfg, rng.normal(6))
        assert loss == -4.0
        assert all(not np.any(g) for g in grads)

    def test_pushes_action_toward_higher_q(self):
        cfg, nets, rng = tiny_agent(alpha=0.0, actor_lr=1e-2)
        for critic in nets.critics:
            constant_critic(critic, 0.0)
            # Q(s, a) = relu(1 + a / bound), increasing in a
            critic.fc.weights[0][-1, 0] = 1.0
            critic.fc.biases[0][0] = 1.0
            critic.fc.weights[1][0, 0] = 1.0
            critic.fc.biases[1][0] = 1.0
            critic.fc.weights[2][0, 0] = 1.0
        states = rng.normal((2, N))
        batch = Batch(states, np.zeros(2), np.zeros(2), states, np.zeros(2))
        learner = SacLearner(nets, cfg, Rng(0))
        before = nets.actor.distribution(states)[0]
        for _ in range(5):
            learner.actor_update(batch, np.zeros(2))
        after = nets.actor.distribution(states)[0]
        assert np.all(after > before)

    def test_critics_frozen(self):
        cfg, nets, rng = tiny_agent()
        learner = SacLearner(nets, cfg, Rng(0))
        before = nets.param_digest("critic1")
        learner.actor_update(random_batch(rng), rng.normal(6))
        assert nets.param_digest("critic1") == before


class TestAgentPersistence:
    @pytest.mark.parametrize("extractor", ["flatten", "deeponet_random"])
    def test_round_trip(self, extractor):
        cfg = SacConfig(extractor=extractor, actor_hidden=(8,), critic_hidden=(8,))
        nets = build_agent(cfg, 101, 5.0, np.ones(101), Rng(0), kind="hyperbolic")
        back = AgentNets.from_bytes(nets.to_bytes(), np.ones(101))
        for name in ("actor", "critic1", "critic2", "target1", "target2"):
            assert back.param_digest(name) == nets.param_digest(name)
        state = np.linspace(0, 1, 101)
        assert back.actor.act(state, deterministic=True) == nets.actor.act(state, deterministic=True)

    def test_pretrained_needs_model(self):
        with pytest.raises(ConfigError):
            build_agent(SacConfig(extractor="deeponet_pretrained"), 101, 5.0, np.ones(101), Rng(0))


def small_env(seed=0):
    return PdeEnv(EnvConfig("hyperbolic", 5.5, 37.0), Rng(seed))


def small_config(**kw):
    base = dict(total_steps=300, warmup=64, batch_size=16, actor_hidden=(16, 16),
                critic_hidden=(16, 16), seed=3)
    base.update(kw)
    return SacConfig(**base)


class TestTraining:
    def test_zero_steps_returns_initial_nets(self):
        cfg = small_config(total_steps=0)
        result = sac_train(small_env(), cfg)
        fresh = build_agent(cfg, 101, 37.0, small_env().coefficient.samples,
                            Rng(derive_seed(cfg.seed, 3)), kind="hyperbolic")
        for name in ("actor", "critic1", "target2"):
            assert result.nets.param_digest(name) == fresh.param_digest(name)
        assert result.rows == []

    def test_deterministic_log(self):
        cfg = small_config()
        logs = [metrics_csv(sac_train(small_env(), cfg), {"sac": {"seed": 3}}) for _ in range(2)]
        assert logs[0] == logs[1]

    def test_episodes_and_updates(self):
        result = sac_train(small_env(), small_config())
        assert result.episode_end_steps[:3] == [99, 199, 299]
        assert result.rows[62]["critic1_loss"] is None
        assert result.rows[63]["critic1_loss"] is not None
        assert all(math.isfinite(r) for r in result.episode_returns)

    def test_critic_parameters_move(self):
        cfg = small_config(total_steps=120)
        result = sac_train(small_env(), cfg)
        fresh = build_agent(cfg, 101, 37.0, small_env().coefficient.samples,
                            Rng(derive_seed(cfg.seed, 3)), kind="hyperbolic")
        assert result.nets.param_digest("critic1") != fresh.param_digest("critic1")
        assert result.nets.param_digest("target1") != fresh.param_digest("target1")


class TestEvaluation:
    def test_summary_metrics(self):
        times = np.arange(11) * 0.1
        norms = np.array([2.0, 3.0, 1.0, 0.5, 0.15, 0.1, 0.1, 0.1, 0.1, 0.1, 0.3])
        report = summarize(times, norms, np.array([1.0, -2.0] * 5))
        assert report.overshoot == 1.5
        assert report.convergence_time == pytest.approx(0.4)
        assert report.steady_state_error == pytest.approx(0.3)
        assert report.total_effort == 15.0

    def test_never_converges(self):
        report = summarize([0.0, 1.0], [1.0, 2.0], [0.0])
        assert report.convergence_time == math.inf

    def test_zero_controller_rollout(self):
        env = small_env()
        report = evaluate_controller(env, lambda s: 0.0, 9.0)
        assert report.norms.shape == (101,) and report.times[-1] == pytest.approx(5.0)
        assert report.total_effort == 0.0

    def test_reward_curve_area(self):
        assert reward_curve_area([0, 10], [-4.0, -2.0]) == pytest.approx(-3.0)
        assert reward_curve_area([5], [-1.0]) == -1.0
        assert math.isnan(reward_curve_area([], []))
