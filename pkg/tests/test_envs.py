import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from decentcem.envs import (
    ACROBOT,
    CARTPOLE,
    ENVS,
    PENDULUM,
    PENDULUM_HANGING,
    ValueTable,
    greedy_return,
    make_env,
    pendulum_reset,
    pendulum_state,
    pendulum_step,
    reward_acrobot,
    reward_cartpole,
    reward_pendulum,
    run_episode,
    value_iteration_pendulum,
)
from decentcem.envs.classic import pendulum_dynamics, pendulum_energy
from decentcem.envs.oracle import PendulumGrid
from decentcem.exceptions import ConvergenceError, ParameterError


def reference_pendulum(c, s, thdot, u):
    # scalar re-derivation of the gym pendulum step
    th = math.atan2(s, c)
    u = min(max(u, -2.0), 2.0)
    thdot = thdot + (3 * 10.0 / 2 * math.sin(th) + 3.0 * u) * 0.05
    thdot = min(max(thdot, -8.0), 8.0)
    th = th + thdot * 0.05
    return math.cos(th), math.sin(th), thdot


@pytest.fixture(scope="module")
def table():
    return value_iteration_pendulum()


class TestPendulum:
    def test_upright_is_fixed(self):
        np.testing.assert_allclose(pendulum_step([1.0, 0.0, 0.0], [0.0]), [1.0, 0.0, 0.0], atol=1e-15)

    def test_hanging_stays_still(self):
        assert abs(pendulum_step([-1.0, 0.0, 0.0], [0.0])[2]) < 1e-12

    def test_matches_reference_integrator(self):
        rng = np.random.default_rng(0)
        err = 0.0
        for _ in range(100):
            th, thd, u = rng.uniform(-np.pi, np.pi), rng.uniform(-8, 8), rng.uniform(-3, 3)
            ours = pendulum_step(pendulum_state(th, thd), [u])
            ref = reference_pendulum(math.cos(th), math.sin(th), thd, u)
            err = max(err, float(np.max(np.abs(ours - np.array(ref)))))
        assert err < 1e-10

    def test_batched_step_matches_rows(self):
        s = np.stack([pendulum_reset(i) for i in range(5)])
        a = np.linspace(-2, 2, 5)[:, None]
        batch = pendulum_step(s, a)
        for i in range(5):
            np.testing.assert_array_equal(batch[i], pendulum_step(s[i], a[i]))

    @pytest.mark.parametrize(
        "theta, thetadot, a, expected",
        [(0.0, 0.0, 0.0, 0.0), (np.pi, 0.0, 0.0, -np.pi**2), (0.0, 1.0, 2.0, -0.104)],
    )
    def test_reward_examples(self, theta, thetadot, a, expected):
        assert reward_pendulum(pendulum_state(theta, thetadot), [a]) == pytest.approx(expected, abs=1e-12)

    def test_reward_wraps_angle(self):
        a = reward_pendulum(pendulum_state(0.1, 0.0), [0.0])
        b = reward_pendulum(pendulum_state(0.1 + 4 * np.pi, 0.0), [0.0])
        assert a == pytest.approx(b, abs=1e-12)

    @given(st.floats(-10, 10), st.floats(-8, 8), st.floats(-2, 2))
    def test_reward_non_positive(self, th, thd, a):
        r = reward_pendulum(pendulum_state(th, thd), [a])
        assert r <= 0.0
        if max(abs(thd), abs(a)) > 1e-100:
            assert r < 0.0

    def test_reset_is_seeded(self):
        np.testing.assert_array_equal(pendulum_reset(3), pendulum_reset(3))
        assert not np.array_equal(pendulum_reset(3), pendulum_reset(4))

    @pytest.mark.parametrize("offset", [0.1, 0.3, 0.5])
    def test_energy_drift_small_swings(self, offset):
        th, w = np.pi - offset, 0.0
        e0 = pendulum_energy(th, w)
        worst = 0.0
        for _ in range(200):
            th, w = pendulum_dynamics(th, w, 0.0)
            worst = max(worst, abs(pendulum_energy(th, w) - e0))
        assert worst / abs(e0) < 0.02

    def test_episode_reproducible(self):
        policy = lambda s, t: [np.sin(t / 7.0) * 2]
        a = run_episode(PENDULUM, policy, pendulum_reset(9))
        b = run_episode(PENDULUM, policy, pendulum_reset(9))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)
        assert a[0].shape == (201, 3)
        assert a[1].shape == (200, 1)

    def test_episode_clips_actions(self):
        _, actions, _ = run_episode(PENDULUM, lambda s, t: [5.0], PENDULUM_HANGING, 3)
        assert np.all(actions == 2.0)


class TestOtherEnvs:
    def test_cartpole_upright_reward(self):
        assert reward_cartpole(np.zeros(4), [0.0]) == 1.0

    def test_cartpole_upright_equilibrium(self):
        np.testing.assert_array_equal(CARTPOLE.step(np.zeros(4), np.zeros(1)), np.zeros(4))

    def test_cartpole_push_moves_cart(self):
        s = CARTPOLE.step(CARTPOLE.step(np.zeros(4), [1.0]), [1.0])
        assert s[0] > 0 and s[1] > 0

    def test_acrobot_rewards(self):
        assert reward_acrobot(np.zeros(4), [0.0]) == -2.0
        assert reward_acrobot(np.array([np.pi, 0, 0, 0]), [0.0]) == pytest.approx(2.0)

    def test_acrobot_hanging_equilibrium(self):
        np.testing.assert_allclose(ACROBOT.step(np.zeros(4), [0.0]), np.zeros(4), atol=1e-12)

    def test_acrobot_velocity_limits(self):
        s = np.zeros(4)
        for _ in range(200):
            s = ACROBOT.step(s, [1.0])
        assert abs(s[2]) <= 4 * np.pi and abs(s[3]) <= 9 * np.pi
        assert -np.pi <= s[0] < np.pi

    def test_registry(self):
        assert set(ENVS) == {"pendulum", "cartpole", "acrobot"}
        assert make_env("pendulum") is PENDULUM
        with pytest.raises(KeyError):
            make_env("hopper")


class TestValueIteration:
    def test_grid_contains_upright_and_hanging(self):
        g = PendulumGrid()
        assert g.theta_index(0.0) == 50
        assert g.thetas[g.theta_index(np.pi)] == pytest.approx(-np.pi)

    def test_converged_residual(self, table):
        assert table.residual < 1e-6
        assert table.bellman_residual() <= 1e-6

    def test_residual_monotone(self, table):
        trace = np.array(table.residual_trace)
        assert np.all(np.diff(trace) <= 1e-12)

    def test_best_cell_is_upright_and_still(self, table):
        i, j = np.unravel_index(np.argmax(table.values), table.values.shape)
        g = table.grid
        assert abs(g.thetas[i]) < 0.1
        assert abs(g.thetadots[j]) < 0.2

    def test_discount_zero_is_one_step_reward(self):
        t = value_iteration_pendulum(20, 15, 7, discount=0.0)
        g = t.grid
        th, thd, a = np.meshgrid(g.thetas, g.thetadots, g.actions, indexing="ij")
        best = reward_pendulum(pendulum_state(th, thd), a[..., None]).max(axis=-1)
        np.testing.assert_allclose(t.values, best, atol=1e-12)

    def test_iteration_cap(self):
        with pytest.raises(ConvergenceError) as info:
            value_iteration_pendulum(20, 20, 5, discount=0.9, max_iters=3)
        assert info.value.residual > 0

    def test_bad_args(self):
        with pytest.raises(ParameterError):
            value_iteration_pendulum(1, 10, 10)
        with pytest.raises(ParameterError):
            value_iteration_pendulum(discount=1.0)

    def test_greedy_policy_swings_up(self, table):
        ret, angles = greedy_return(table, PENDULUM_HANGING, 200)
        upright = np.flatnonzero(np.abs(angles[1:]) < 0.3)
        assert upright.size and upright[0] < 150
        assert np.all(np.abs(angles[upright[0] + 1 + 20 :]) < 0.3)

    def test_csv_round_trip(self, table, tmp_path):
        path = tmp_path / "v.csv"
        table.to_csv(path)
        back = ValueTable.from_csv(path)
        np.testing.assert_array_equal(back.values, table.values)
        assert back.discount == table.discount
        assert (back.theta_bins, back.thetadot_bins, back.action_bins) == (100, 100, 50)
        assert path.read_text().splitlines()[0] == "theta_bins,thetadot_bins,action_bins,discount"

    def test_from_csv_rejects_other_files(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(ParameterError):
            ValueTable.from_csv(path)
