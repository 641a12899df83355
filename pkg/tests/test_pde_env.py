import math

import numpy as np
import pytest

from pdectrl.errors import ConfigError, EnvironmentFault
from pdectrl.numerics import Grid, Rng
from pdectrl.pde_env import (HYPERBOLIC, PARABOLIC, CoefficientFn, EnvConfig, EpisodeRecord,
                             PdeEnv, hyperbolic_solver_step, l2_norm, parabolic_solver_step,
                             sample_coefficient, simulate, terminal_bonus)


class TestCoefficient:
    def test_right_endpoint(self, grid):
        for gamma in (5.5, 6.3, 7.0):
            assert sample_coefficient(HYPERBOLIC, gamma, grid).samples[-1] == pytest.approx(5.0)

    def test_left_endpoint_integer_cycles(self, grid):
        assert sample_coefficient(HYPERBOLIC, 6.0, grid).samples[0] == pytest.approx(-5.0)

    def test_left_endpoint_fractional(self, grid):
        beta = sample_coefficient(HYPERBOLIC, 5.5, grid).samples
        assert beta[0] == pytest.approx(5 * math.cos(2.75 * math.pi), abs=1e-12)
        assert beta[0] == pytest.approx(-3.53553, abs=1e-5)

    def test_amplitudes(self, grid):
        assert np.max(np.abs(sample_coefficient(HYPERBOLIC, 6.1, grid).samples)) <= 5.0
        lam = sample_coefficient(PARABOLIC, 9.0, grid).samples
        assert np.max(np.abs(lam)) <= 50.0
        assert lam[-1] == pytest.approx(50.0)


class TestNorm:
    def test_zero(self, grid):
        assert l2_norm(np.zeros(101), grid.dx) == 0.0

    def test_constant(self, grid):
        assert l2_norm(np.full(101, 3.0), grid.dx) == pytest.approx(3.0, abs=1e-14)

    def test_linear(self, grid):
        assert l2_norm(grid.x, grid.dx) == pytest.approx(math.sqrt(0.33335), abs=1e-14)


class TestHyperbolicStep:
    def test_equilibrium(self, grid):
        beta = sample_coefficient(HYPERBOLIC, 5.5, grid).samples
        out = hyperbolic_solver_step(np.zeros(101), beta, 0.0, 1e-3, grid.dx)
        np.testing.assert_array_equal(out, 0.0)

    def test_steady_state(self, grid):
        out = hyperbolic_solver_step(np.full(101, 2.5), np.zeros(101), 2.5, 1e-3, grid.dx)
        np.testing.assert_array_equal(out, 2.5)

    def test_hand_stencil(self):
        out = hyperbolic_solver_step(np.array([1.0, 2.0, 3.0]), np.ones(3), 0.0, 0.1, 0.5)
        np.testing.assert_allclose(out, [1.3, 2.3, 0.0], atol=1e-15)

    def test_cfl(self):
        with pytest.raises(ConfigError):
            hyperbolic_solver_step(np.zeros(3), np.zeros(3), 0.0, 0.6, 0.5)


class TestParabolicStep:
    def test_equilibrium(self, grid):
        lam = sample_coefficient(PARABOLIC, 9.0, grid).samples
        out = parabolic_solver_step(np.zeros(101), lam, 0.0, 1e-3, grid.dx)
        np.testing.assert_array_equal(out, 0.0)

    def test_discrete_harmonic_fixed_point(self, grid):
        out = parabolic_solver_step(grid.x, np.zeros(101), 1.0, 1e-3, grid.dx)
        np.testing.assert_allclose(out, grid.x, atol=1e-13)

    def test_single_interior_node(self):
        out = parabolic_solver_step(np.array([0.0, 1.0, 0.0]), np.zeros(3), 0.0, 0.1, 0.5)
        assert out[1] == pytest.approx(1 / 1.8, abs=1e-15)
        assert out[1] == pytest.approx(0.55556, abs=1e-5)

    def test_matches_dense_backward_euler(self, grid):
        lam = sample_coefficient(PARABOLIC, 10.0, grid).samples
        u = np.sin(3 * grid.x) + grid.x
        dt, dx = 1e-3, grid.dx
        m = 99
        lap = (np.diag(-2 * np.ones(m)) + np.diag(np.ones(m - 1), 1) + np.diag(np.ones(m - 1), -1)) / dx**2
        A = np.eye(m) - dt * lap - dt * np.diag(lam[1:-1])
        rhs = u[1:-1].copy()
        rhs[-1] += dt / dx**2 * 0.7
        expected = np.linalg.solve(A, rhs)
        out = parabolic_solver_step(u, lam, 0.7, dt, dx)
        np.testing.assert_allclose(out[1:-1], expected, atol=1e-12)
        assert out[0] == 0.0 and out[-1] == 0.7


def make_env(kind=HYPERBOLIC, gamma=5.5, bound=37.0, seed=0, **kw):
    return PdeEnv(EnvConfig(kind, gamma, bound, **kw), Rng(seed))


class TestEnv:
    def test_config_defaults(self):
        cfg = EnvConfig(HYPERBOLIC, 5.5, 10.0)
        assert cfg.n_interactions == 100
        assert cfg.dt * cfg.steps_per_action * 100 == pytest.approx(cfg.horizon)
        cfg = EnvConfig(PARABOLIC, 9.0, 10.0)
        assert (cfg.horizon, cfg.steps_per_action, cfg.n_interactions) == (1.0, 10, 100)

    def test_config_errors(self):
        with pytest.raises(ConfigError):
            EnvConfig(HYPERBOLIC, 5.5, 0.0)
        with pytest.raises(ConfigError):
            EnvConfig(HYPERBOLIC, 5.5, 1.0, zeta=0.0)
        with pytest.raises(ConfigError):
            EnvConfig(HYPERBOLIC, 5.5, 1.0, horizon=5.01)

    def test_fixed_reset(self):
        env = make_env()
        np.testing.assert_array_equal(env.reset(9.0), 9.0)
        assert env.state.time == 0.0
        assert env.record.action_abs_sum == 0.0 and env.record.step_count == 0

    def test_seeded_reset(self):
        assert make_env(seed=3).reset()[0] == make_env(seed=3).reset()[0]

    def test_reset_distribution(self):
        env = make_env(seed=11)
        levels = np.array([env.reset()[0] for _ in range(10_000)])
        assert levels.min() >= 1.0 and levels.max() < 10.0
        assert 5.3 <= levels.mean() <= 5.7

    def test_equilibrium_step(self):
        env = make_env()
        env.reset(0.0)
        _, reward, done, truncated = env.step(0.0)
        assert reward == 0.0 and not done and not truncated

    def test_steady_state_zero_reward(self, grid):
        cfg = EnvConfig(HYPERBOLIC, 5.5, 5.0)
        env = PdeEnv(cfg, coefficient=CoefficientFn(HYPERBOLIC, 0.0, np.zeros(101)))
        env.reset(1.0)
        _, reward, _, _ = env.step(1.0)
        assert reward == 0.0
        np.testing.assert_array_equal(env.state.values, 1.0)

    def test_blowup_terminates(self):
        env = make_env(blowup_limit=100.0)
        env.reset(0.0)
        env.state.values[:] = 150.0
        _, _, done, truncated = env.step(150.0)
        assert l2_norm(env.state.values, env.dx) > 100.0
        assert done and truncated

    def test_horizon_terminates_after_100_steps(self):
        env = make_env()
        env.reset(2.0)
        for k in range(100):
            _, _, done, truncated = env.step(0.0)
            assert done == (k == 99)
        assert not truncated
        assert env.record.step_count == 100

    def test_action_clamped_and_accumulated(self):
        env = make_env(bound=3.0)
        env.reset(1.0)
        env.step(10.0)
        env.step(-1.0)
        assert env.state.values[-1] == -1.0
        assert env.record.action_abs_sum == 4.0

    def test_rewards_nonpositive_without_bonus(self):
        env = make_env(seed=5)
        rng = Rng(9)
        env.reset()
        done = False
        while not done:
            _, reward, done, _ = env.step(rng.uniform(-37, 37))
            assert reward - env.last_bonus <= 0.0

    def test_fault(self):
        env = make_env()
        env.reset(1.0)
        env.state.values[3] = np.nan
        with pytest.raises(EnvironmentFault):
            env.step(0.0)

    def test_bit_reproducible(self):
        def run():
            env = make_env(PARABOLIC, 9.0, 150.0, seed=4)
            rng = Rng(1)
            env.reset()
            out = []
            for _ in range(30):
                s, r, d, _ = env.step(rng.uniform(-150, 150))
                out.append((s.tobytes(), r, d))
            return out
        assert run() == run()

    def test_state_norm_reward_mode(self):
        env = make_env(reward_mode="state_norm")
        env.reset(2.0)
        s, r, _, _ = env.step(0.0)
        assert r == pytest.approx(-l2_norm(s, env.dx))


class TestTerminalBonus:
    def test_far_from_origin(self):
        assert terminal_bonus(EpisodeRecord(0.0, 5.0, 100), 10.0, 100.0, 0.2) == 0.0

    def test_zero_everything(self):
        assert terminal_bonus(EpisodeRecord(0.0, 0.0, 100), 10.0, 100.0, 0.2) == 10.0

    def test_arithmetic(self):
        assert terminal_bonus(EpisodeRecord(50.0, 0.1, 100), 10.0, 100.0, 0.2) == pytest.approx(9.4)

    def test_bonus_folded_into_final_reward(self):
        cfg = EnvConfig(PARABOLIC, 9.0, 150.0, horizon=0.02, zeta=100.0)
        env = PdeEnv(cfg, Rng(0))
        ref = PdeEnv(cfg, coefficient=env.coefficient)
        env.reset(1.0)
        ref.reset(1.0)
        _, _, d1, _ = env.step(0.0)
        ref.step(0.0)
        before = ref.state.values.copy()
        after, r2, d2, _ = env.step(0.0)
        assert not d1 and d2
        assert env.last_bonus == pytest.approx(10.0 - l2_norm(after, env.dx))
        assert r2 == pytest.approx(-l2_norm(after - before, env.dx) + env.last_bonus, abs=1e-12)


def test_simulate_records_every_k(grid):
    coeff = sample_coefficient(HYPERBOLIC, 6.0, grid)
    times, states, controls = simulate(coeff, np.full(101, 2.0), 100, 1e-3, record_every=50)
    np.testing.assert_allclose(times, [0.0, 0.05, 0.1])
    assert states.shape == (3, 101) and controls.shape == (3,)
