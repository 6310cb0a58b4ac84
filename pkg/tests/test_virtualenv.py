from functools import partial

import numpy as np
import pytest

from metal.dynmodel import DynamicsModel
from metal.envs import Task, TaskFamily, make_spec, make_variant, reset, reward, step_dynamics
from metal.trpo import GaussianPolicy
from metal.virtualenv import (VirtualRolloutConfig, collect_samples, estimate_return,
                              real_dynamics, rollout, virtual_rollout)

SPEC = make_spec("point-mass", horizon=30)
VAR = make_variant("point-mass")
FAM = TaskFamily("goal-velocity-1d")
TASK = Task(np.array([0.8]), FAM)


def policy(seed=0):
    return GaussianPolicy(4, 2, (8, 8), np.random.default_rng(seed), out_scale=1.0)


class ConstantReward:
    def __init__(self, c):
        self.c = c

    def reward(self, s, a):
        return np.full(s.shape[:-1], self.c)


class TestRollout:
    def test_oracle_model_matches_real_bitwise(self):
        pol = policy()
        real = rollout(pol, real_dynamics(SPEC, VAR), SPEC, TASK, 4, np.random.default_rng(1))
        oracle = lambda s, a: step_dynamics(SPEC, VAR, s, a)
        virt = rollout(pol, oracle, SPEC, TASK, 4, np.random.default_rng(1))
        for r, v in zip(real, virt):
            for key in ("states", "actions", "next_states", "rewards"):
                assert getattr(r, key).tobytes() == getattr(v, key).tobytes()

    def test_zero_model_keeps_initial_state(self):
        model = DynamicsModel(4, 2, (8,))
        trajs = virtual_rollout(policy(), model, SPEC, TASK, np.random.default_rng(2), 3)
        for t in trajs:
            assert np.all(t.states == t.states[0]) and len(t) == SPEC.horizon

    def test_rewards_recomputed_offline(self):
        pol = policy(3)
        model = DynamicsModel(4, 2, (8,), np.random.default_rng(4), out_scale=1.0)
        for t in virtual_rollout(pol, model, SPEC, TASK, np.random.default_rng(5), 3):
            again = reward(FAM, TASK.psi, t.states, SPEC.clip_action(t.actions))
            assert np.array_equal(again, t.rewards)

    def test_actions_stored_unclipped(self):
        pol = policy()
        pol.log_std[:] = 2.0
        t = rollout(pol, real_dynamics(SPEC, VAR), SPEC, TASK, 1, np.random.default_rng(0))[0]
        assert np.abs(t.actions).max() > 1.0

    def test_nan_truncates_and_flags(self):
        calls = {"n": 0}

        def bad(s, a):
            calls["n"] += 1
            out = step_dynamics(SPEC, VAR, s, a)
            if calls["n"] == 4:
                out[0] = np.nan
            return out

        trajs = rollout(policy(), bad, SPEC, TASK, 2, np.random.default_rng(0))
        assert len(trajs[0]) == 3 and trajs[0].diverged
        assert len(trajs[1]) == SPEC.horizon and not trajs[1].diverged
        assert np.all(np.isfinite(trajs[0].next_states))

    def test_state_clip_terminates(self):
        blow_up = lambda s, a: s * 10 + 1
        t = rollout(policy(), blow_up, SPEC, TASK, 1, np.random.default_rng(0))[0]
        assert t.diverged and len(t) == 3  # 1, 11, 111 > 100
        assert np.abs(t.next_states[-1]).max() > 100

    def test_never_longer_than_horizon(self):
        for t in rollout(policy(), real_dynamics(SPEC, VAR), SPEC, TASK, 5,
                         np.random.default_rng(0)):
            assert len(t) <= SPEC.horizon

    def test_collect_exact_count(self):
        trajs = collect_samples(policy(), real_dynamics(SPEC, VAR), SPEC, TASK, 70,
                                np.random.default_rng(0))
        assert [len(t) for t in trajs] == [30, 30, 10]

    def test_config_invariants(self):
        with pytest.raises(ValueError):
            VirtualRolloutConfig(horizon=50, n_trpo=10)
        with pytest.raises(ValueError):
            VirtualRolloutConfig(horizon=0)


class TestEstimateReturn:
    def test_constant_reward(self):
        est = estimate_return(policy(), real_dynamics(SPEC, VAR), SPEC, ConstantReward(-0.5), 5,
                              np.random.default_rng(0))
        assert est.mean == pytest.approx(-0.5 * SPEC.horizon, abs=1e-12)
        assert est.stderr == 0.0
        assert est.steps == 5 * SPEC.horizon

    def test_point_mass_closed_form(self):
        spec = make_spec("point-mass", horizon=50)
        zero = GaussianPolicy(4, 2, (8,))  # zero weights: mean action 0
        task = Task(np.array([0.0]), FAM)
        est = estimate_return(zero, real_dynamics(spec, VAR), spec, task, 20,
                              np.random.default_rng(11), deterministic=True)
        v0 = reset(spec, np.random.default_rng(11), 20)[:, 2]
        decay = 1 - VAR.dt * VAR.drag
        closed = -np.abs(v0) * (1 - decay ** spec.horizon) / (1 - decay)
        np.testing.assert_allclose(est.returns, closed, rtol=0, atol=1e-9)
        assert est.mean == pytest.approx(closed.mean(), abs=1e-9)

    def test_oracle_virtual_equals_real(self):
        pol = policy(7)
        oracle = partial(step_dynamics, SPEC, VAR)
        a = estimate_return(pol, oracle, SPEC, TASK, 6, np.random.default_rng(3))
        b = estimate_return(pol, real_dynamics(SPEC, VAR), SPEC, TASK, 6,
                            np.random.default_rng(3))
        assert a.mean == b.mean and np.array_equal(a.returns, b.returns)

    def test_rejects_zero_rollouts(self):
        with pytest.raises(ValueError):
            estimate_return(policy(), real_dynamics(SPEC, VAR), SPEC, TASK, 0,
                            np.random.default_rng(0))
