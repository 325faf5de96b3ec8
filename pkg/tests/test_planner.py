from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

from decentcem.cem import cem_run
from decentcem.distributions import DiagonalGaussian
from decentcem.envs import PENDULUM, PENDULUM_HANGING, pendulum_angle
from decentcem.exceptions import ConfigError
from decentcem.models import TrueDynamics, init_mlp, mlp_forward
from decentcem.planner import (
    ActionSequenceObjective,
    Agent,
    Diagnostics,
    PlannerConfig,
    PlanRecord,
    PolicyEnsemble,
    _shift,
    big_network_hidden,
    evaluate_agent,
    plan_decent_cem_a,
    plan_decent_cem_p,
    plan_decent_pets,
    policy_control_act,
    run_episode_agent,
    run_training,
    step_streams,
    train_policies_avg,
    train_policies_bc,
)

TRUE = TrueDynamics(PENDULUM)
S0 = np.array([np.cos(2.0), np.sin(2.0), 0.5])


def small(**kw):
    base = dict(horizon=8, total_population=60, num_instances=3, max_cem_iters=3,
                use_true_dynamics=True)
    base.update(kw)
    return PlannerConfig(**base)


def streams(m, key=(0, 0)):
    return step_streams(11, key, m)


class BoundsCheckingModel:
    n_members = 1

    def __init__(self, env):
        self.env = env
        self.seen = 0

    def next_state(self, s, a, members=None):
        assert np.all(a >= self.env.action_low) and np.all(a <= self.env.action_high)
        self.seen += len(a)
        return self.env.step(s, a)


class TestConfig:
    def test_defaults(self):
        cfg = PlannerConfig()
        assert (cfg.horizon, cfg.total_population, cfg.elite_ratio) == (30, 500, 0.1)
        assert (cfg.init_variance, cfg.max_cem_iters, cfg.num_instances) == (0.25, 5, 5)
        assert cfg.shares == [100] * 5

    @pytest.mark.parametrize("kw", [dict(mode="ppo"), dict(horizon=0), dict(num_instances=0),
                                    dict(elite_ratio=1.5), dict(init_variance=0.0),
                                    dict(total_population=3, num_instances=4)])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            PlannerConfig(**kw)

    def test_policy_sizes(self):
        assert PlannerConfig(mode="decent_cem_p").policy_hidden == (32,)
        assert PlannerConfig(mode="decent_cem_a").policy_hidden == (64, 64)


class TestStreams:
    def test_reproducible_and_distinct(self):
        a, ma = step_streams(3, (0, 5), 3)
        b, mb = step_streams(3, (0, 5), 3)
        assert [g.random() for g in a] == [g.random() for g in b]
        assert ma.random() == mb.random()
        c, _ = step_streams(3, (0, 6), 3)
        assert a[0].random() != c[0].random()


class TestDecentPets:
    def test_single_instance_is_centralized_cem(self):
        cfg = small(num_instances=1)
        rngs, _ = streams(1)
        action, rec = plan_decent_pets(S0, cfg, PENDULUM, TRUE, rngs)
        obj = ActionSequenceObjective(TRUE, PENDULUM, S0, cfg.horizon, cfg.discount)
        lo, hi = np.full(8, -2.0), np.full(8, 2.0)
        ref = cem_run(DiagonalGaussian(np.zeros(8), 0.25), obj, cfg.cem_config(lo, hi), streams(1)[0][0])
        np.testing.assert_array_equal(rec.means[0].ravel(), ref.final_dist.mean)
        assert rec.values[0] == ref.expected_value
        np.testing.assert_array_equal(action, np.clip(ref.final_dist.mean[:1], -2, 2))

    def test_actions_stay_in_bounds(self):
        model = BoundsCheckingModel(PENDULUM)
        cfg = small(init_variance=25.0)
        action, rec = plan_decent_pets(S0, cfg, PENDULUM, model, streams(3)[0])
        assert model.seen == 60 * 3 * 8
        assert np.all(np.abs(action) <= 2.0)
        assert np.all(np.abs(rec.first_actions) <= 2.0)

    def test_selected_dominates(self):
        _, rec = plan_decent_pets(S0, small(), PENDULUM, TRUE, streams(3)[0])
        assert rec.values[rec.selected] == rec.values.max()
        np.testing.assert_array_equal(rec.action, rec.first_actions[rec.selected])

    def test_warm_start_is_shifted_previous_solution(self):
        cfg = small(max_cem_iters=0)
        warm = np.random.default_rng(0).uniform(-2, 2, size=(3, 8, 1))
        _, rec = plan_decent_pets(S0, cfg, PENDULUM, TRUE, streams(3)[0], warm)
        for i in range(3):
            np.testing.assert_array_equal(rec.means[i, :-1], warm[i, 1:])
            np.testing.assert_array_equal(rec.means[i, -1], PENDULUM.action_mid)

    def test_shift_helper(self):
        seq = np.arange(4.0)[:, None]
        np.testing.assert_array_equal(_shift(seq, [9.0])[:, 0], [1, 2, 3, 9])

    def test_agent_carries_warm_start(self):
        agent = Agent(small(), PENDULUM, seed=0)
        _, first = agent.plan(S0)
        assert agent.warm is first.means
        agent.reset()
        assert agent.warm is None


class TestDecentCemA:
    def test_zero_policies_match_pets(self):
        cfg = small(mode="decent_cem_a")
        pol = PolicyEnsemble.random(3, 3, 1, (8,), np.random.default_rng(0), zero=True)
        rngs, misc = streams(3)
        a, rec = plan_decent_cem_a(S0, cfg, PENDULUM, TRUE, pol, rngs, misc)
        b, ref = plan_decent_pets(S0, cfg, PENDULUM, TRUE, streams(3)[0])
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(rec.means, ref.means)

    def test_every_instance_gets_a_pair(self):
        cfg = small(mode="decent_cem_a")
        pol = PolicyEnsemble.random(3, 3, 1, (8,), np.random.default_rng(1))
        for step in range(4):
            rngs, misc = streams(3, (0, step))
            _, rec = plan_decent_cem_a(S0, cfg, PENDULUM, TRUE, pol, rngs, misc)
        assert [len(b) for b in pol.buffers] == [4, 4, 4]
        np.testing.assert_array_equal(pol.buffers[2][-1][1], rec.first_actions[2])
        assert rec.values[rec.selected] >= rec.values.max()

    def test_no_collect_in_evaluation(self):
        cfg = small(mode="decent_cem_a")
        pol = PolicyEnsemble.random(3, 3, 1, (8,), np.random.default_rng(1))
        rngs, misc = streams(3)
        plan_decent_cem_a(S0, cfg, PENDULUM, TRUE, pol, rngs, misc, collect=False)
        assert all(len(b) == 0 for b in pol.buffers)


class TestDecentCemP:
    def test_parameter_count(self):
        pol = PolicyEnsemble.random(2, 3, 1, (32,), np.random.default_rng(0))
        assert pol.members[0].n_params == 161

    def test_zero_iterations_act_with_best_unperturbed_policy(self):
        cfg = small(mode="decent_cem_p", max_cem_iters=0, horizon=5)
        pol = PolicyEnsemble.random(3, 3, 1, (4,), np.random.default_rng(2))
        a, rec = plan_decent_cem_p(S0, cfg, PENDULUM, TRUE, pol, streams(3)[0])
        assert np.all(rec.deltas == 0)
        np.testing.assert_array_equal(a, pol.act(rec.selected, S0, PENDULUM))

    def test_selection_invariant_to_reward_scale(self):
        scaled = replace(PENDULUM, reward=lambda s, a: 4.0 * PENDULUM.reward(s, a))
        cfg = small(mode="decent_cem_p", horizon=5)
        pol = PolicyEnsemble.random(3, 3, 1, (4,), np.random.default_rng(2))
        _, r1 = plan_decent_cem_p(S0, cfg, PENDULUM, TRUE, pol.copy(), streams(3)[0])
        _, r2 = plan_decent_cem_p(S0, cfg, scaled, TrueDynamics(scaled), pol.copy(), streams(3)[0])
        assert r1.selected == r2.selected
        np.testing.assert_array_equal(r1.deltas, r2.deltas)

    def test_offsets_are_stored(self):
        cfg = small(mode="decent_cem_p", horizon=4)
        pol = PolicyEnsemble.random(3, 3, 1, (4,), np.random.default_rng(3))
        _, rec = plan_decent_cem_p(S0, cfg, PENDULUM, TRUE, pol, streams(3)[0])
        for i in range(3):
            np.testing.assert_array_equal(pol.buffers[i][0], rec.deltas[i])
        assert np.all(np.abs(rec.action) <= 2.0)


class TestPolicyTraining:
    def test_bc_hits_repeated_target(self):
        pol = PolicyEnsemble.random(1, 3, 1, (8,), np.random.default_rng(0))
        pol.buffers[0] = [(S0, np.array([1.3]))] * 32
        train_policies_bc(pol, lr=1e-2, epochs=300, batch=32)
        assert (pol.act(0, S0)[0] - 1.3) ** 2 < 1e-4

    def test_bc_isolation(self):
        pol = PolicyEnsemble.random(2, 3, 1, (8,), np.random.default_rng(0))
        before = pol.members[1].flatten()
        pol.buffers[0] = [(S0, np.array([1.0]))] * 4
        train_policies_bc(pol, lr=1e-2, epochs=10)
        np.testing.assert_array_equal(pol.members[1].flatten(), before)
        assert not np.array_equal(pol.members[0].flatten(), PolicyEnsemble.random(
            2, 3, 1, (8,), np.random.default_rng(0)).members[0].flatten())

    def test_bc_zero_lr(self):
        pol = PolicyEnsemble.random(2, 3, 1, (8,), np.random.default_rng(0))
        before = [p.flatten() for p in pol.members]
        pol.buffers = [[(S0, np.array([1.0]))], [(S0, np.array([-1.0]))]]
        train_policies_bc(pol, lr=0.0)
        for p, b in zip(pol.members, before):
            np.testing.assert_array_equal(p.flatten(), b)

    def test_avg_zero_mean_offsets(self):
        pol = PolicyEnsemble([init_mlp((1, 1), np.random.default_rng(0))])
        before = pol.members[0].flatten()
        pol.buffers[0] = [np.array([2.0, 2.0]), np.array([-2.0, -2.0])]
        train_policies_avg(pol)
        np.testing.assert_array_equal(pol.members[0].flatten(), before)
        assert pol.buffers == [[]]

    def test_avg_single_offset_and_isolation(self):
        pol = PolicyEnsemble.random(2, 3, 1, (4,), np.random.default_rng(0))
        t0, t1 = pol.members[0].flatten(), pol.members[1].flatten()
        d = np.random.default_rng(1).normal(size=t0.size)
        pol.buffers[0] = [d]
        train_policies_avg(pol)
        np.testing.assert_array_equal(pol.members[0].flatten(), t0 + d)
        np.testing.assert_array_equal(pol.members[1].flatten(), t1)


class TestPolicyControl:
    def test_single_member_is_its_output(self):
        pol = PolicyEnsemble.random(1, 3, 1, (8,), np.random.default_rng(0))
        a = policy_control_act(pol, S0, PENDULUM, TRUE)
        np.testing.assert_array_equal(a, np.clip(mlp_forward(pol.members[0], S0), -2, 2))

    def test_identical_members(self):
        p = init_mlp((3, 8, 1), np.random.default_rng(0))
        pol = PolicyEnsemble([p.copy() for _ in range(3)])
        np.testing.assert_array_equal(policy_control_act(pol, S0, PENDULUM, TRUE, horizon=5),
                                      pol.act(0, S0, PENDULUM))

    def test_random_nets_worse_than_planning(self):
        cfg = PlannerConfig(use_true_dynamics=True, num_instances=1, mode="policy_control",
                            horizon=20, total_population=200)
        agent = Agent(cfg, PENDULUM, seed=0)
        pc, _ = evaluate_agent(agent, 100, 1, 0, start=PENDULUM_HANGING)
        planned, _ = evaluate_agent(agent, 100, 1, 0, start=PENDULUM_HANGING, act_mode="decent_pets")
        assert planned > pc + 100

    def test_big_network_matches_weight_budget(self):
        small_params = init_mlp((3, 64, 64, 1), np.random.default_rng(0)).n_params
        h = big_network_hidden(5, 3, 1)
        big = init_mlp((3, *h, 1), np.random.default_rng(0)).n_params
        assert abs(big - 5 * small_params) / (5 * small_params) < 0.01


class TestDiagnostics:
    def test_ratios_and_distances(self):
        d = Diagnostics(4)
        rng = np.random.default_rng(0)
        for t in range(7):
            sel = int(rng.integers(4))
            acts = rng.normal(size=(4, 1))
            d.record(PlanRecord(acts, rng.normal(size=4), sel, acts[sel], acts[:, None]))
            assert sum(d.selection_ratios()) == Fraction(1)
            assert len(d.distances[-1]) == 6
        assert len(d.rows) == 28
        assert sum(r[2] for r in d.rows) == 7


class TestTraining:
    def cfg(self, **kw):
        base = dict(horizon=10, total_population=60, num_instances=3, max_cem_iters=2,
                    use_true_dynamics=True, eval_episodes=2)
        base.update(kw)
        return PlannerConfig(**base)

    def test_true_dynamics_curve_is_flat(self):
        run = run_training(PENDULUM, self.cfg(), 3, seed=1, steps=15)
        assert run.complete
        means = [r["eval_return_mean"] for r in run.curve]
        assert means[0] == means[1] == means[2]
        assert [r["step"] for r in run.curve] == [15, 30, 45]

    def test_reproducible_table(self):
        cfg = self.cfg(mode="decent_cem_a", policy_hidden_a=(8,))
        a = run_training(PENDULUM, cfg, 3, seed=2, steps=10)
        b = run_training(PENDULUM, cfg, 3, seed=2, steps=10)
        assert a.curve == b.curve
        assert len(a.diagnostics.rows) == 2 * 10 * 3

    def test_learned_model_runs(self):
        cfg = self.cfg(use_true_dynamics=False, model_hidden=(8,), model_members=2, eval_episodes=1)
        run = run_training(PENDULUM, cfg, 2, seed=1, steps=10)
        assert run.complete and len(run.curve) == 2
        assert run.planning_samples == [0, 10 * 60 * 2]

    def test_p_mode_runs(self):
        cfg = self.cfg(mode="decent_cem_p", policy_hidden_p=(4,), eval_episodes=1)
        run = run_training(PENDULUM, cfg, 3, seed=1, steps=5)
        assert run.complete
        assert all(len(b) == 0 for b in run.agent.policies.buffers)

    def test_failure_keeps_partial_table(self):
        calls = {"n": 0}

        def flaky(s, a):
            calls["n"] += 1
            if calls["n"] > 400:
                raise RuntimeError("sensor fault")
            return PENDULUM.step(s, a)

        env = replace(PENDULUM, step=flaky)
        run = run_training(env, self.cfg(eval_episodes=1), 4, seed=1, steps=10)
        assert not run.complete
        assert "sensor fault" in run.error

    def test_needs_two_episodes(self):
        with pytest.raises(ConfigError):
            run_training(PENDULUM, self.cfg(), 1)

    def test_swing_up_with_true_dynamics(self):
        cfg = PlannerConfig(use_true_dynamics=True, num_instances=5)
        agent = Agent(cfg, PENDULUM, seed=1)
        _, states, _ = run_episode_agent(agent, PENDULUM_HANGING, 100, 1, collect=False)
        assert np.min(np.abs(pendulum_angle(states))) < 0.3
