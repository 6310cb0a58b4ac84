import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metal.envs import (Task, TaskFamily, make_spec, make_variant, reset, reward, sample_task,
                        step_dynamics)

PM = make_spec("point-mass")
PEND = make_spec("pendulum")
NOMINAL = make_variant("point-mass")


class TestReset:
    def test_seeded_reset_is_reproducible(self):
        a = reset(PM, np.random.default_rng(5), 10)
        b = reset(PM, np.random.default_rng(5), 10)
        assert np.array_equal(a, b)

    def test_point_mass_support(self):
        s = reset(PM, np.random.default_rng(0), 10_000)
        assert np.all(s[:, :2] == 0)
        assert np.all(np.abs(s[:, 2:]) <= 0.05)

    def test_pendulum_omega_mean(self):
        s = reset(PEND, np.random.default_rng(1), 100_000)
        assert abs(s[:, 2].mean()) < 0.01
        assert np.all(np.abs(s[:, 2]) <= 0.5)
        np.testing.assert_allclose(s[:, 0] ** 2 + s[:, 1] ** 2, 1.0, rtol=1e-12)

    def test_single_state_shape(self):
        assert reset(PM, np.random.default_rng(0)).shape == (4,)


class TestDynamics:
    def test_point_mass_fixed_point(self):
        s = np.array([0.3, -0.2, 0.0, 0.0])
        assert np.array_equal(step_dynamics(PM, NOMINAL, s, np.zeros(2)), s)

    def test_point_mass_euler_step(self):
        s2 = step_dynamics(PM, NOMINAL, np.array([0.0, 0.0, 1.0, 0.0]), np.zeros(2))
        np.testing.assert_allclose(s2, [0.04975, 0.0, 0.995, 0.0], rtol=1e-14)

    def test_pendulum_equilibrium(self):
        s = np.array([1.0, 0.0, 0.0])
        assert np.array_equal(step_dynamics(PEND, make_variant("pendulum"), s, np.zeros(1)), s)

    def test_actions_are_clipped(self):
        s = np.zeros(4)
        np.testing.assert_array_equal(step_dynamics(PM, NOMINAL, s, np.array([5.0, -7.0])),
                                      step_dynamics(PM, NOMINAL, s, np.array([1.0, -1.0])))

    def test_pendulum_velocity_clip(self):
        s2 = step_dynamics(PEND, make_variant("pendulum"), np.array([1.0, 0.0, 7.99]),
                           np.array([2.0]))
        assert s2[2] == 8.0

    def test_non_finite_state_rejected(self):
        with pytest.raises(FloatingPointError):
            step_dynamics(PM, NOMINAL, np.array([np.nan, 0, 0, 0]), np.zeros(2))

    def test_variants(self):
        assert NOMINAL.gains == (1.0, 1.0)
        assert make_variant("point-mass", "low-friction").drag == pytest.approx(0.05)
        assert make_variant("point-mass", "crippled").gains == (0.0, 1.0)
        with pytest.raises(ValueError):
            make_variant("point-mass", "broken")

    @pytest.mark.parametrize("name", ["crippled", "low-friction"])
    def test_shift_changes_reachable_states(self, name):
        probe = np.tile([1.0, 0.5], (50, 1))
        s_nom = s_var = np.zeros(4)
        var = make_variant("point-mass", name)
        for a in probe:
            s_nom = step_dynamics(PM, NOMINAL, s_nom, a)
            s_var = step_dynamics(PM, var, s_var, a)
        assert not np.allclose(s_nom, s_var)

    def test_crippled_cannot_reach_positive_x(self):
        var = make_variant("point-mass", "crippled")
        s = np.zeros(4)
        for _ in range(50):
            s = step_dynamics(PM, var, s, np.array([1.0, 0.0]))
        assert s[0] == 0.0 and s[2] == 0.0

    def test_dynamics_independent_of_task(self):
        fam = TaskFamily("goal-velocity-1d")
        rng = np.random.default_rng(3)
        actions = rng.uniform(-1, 1, size=(30, 2))
        runs = []
        for psi in (0.1, 1.9):
            task = Task(np.array([psi]), fam)
            s, traj = np.zeros(4), []
            for a in actions:
                task.reward(s, a)
                s = step_dynamics(PM, NOMINAL, s, a)
                traj.append(s)
            runs.append(np.array(traj))
        assert runs[0].tobytes() == runs[1].tobytes()


class TestReward:
    def test_goal_met(self):
        fam = TaskFamily("goal-velocity-1d")
        assert reward(fam, np.array([1.2]), np.array([0, 0, 1.2, 0.3]), np.zeros(2)) == 0.0

    def test_forward_backward_sign(self):
        fam = TaskFamily("forward-backward", low=(-1.0,), high=(1.0,))
        assert reward(fam, np.array([-1.0]), np.array([0, 0, 2.0, 0]), np.zeros(2)) == -2.0

    def test_goal_velocity_2d_value(self):
        fam = TaskFamily("goal-velocity-2d", low=(-1.0, -1.0), high=(1.0, 1.0))
        r = reward(fam, np.array([0.0, 1.0]), np.array([0, 0, 1.0, 0.0]), np.array([0.5, 0.0]))
        assert r == pytest.approx(-2.0125, abs=1e-15)

    def test_pendulum_reward(self):
        fam = TaskFamily("goal-velocity-1d", body="pendulum", low=(-1.0,), high=(1.0,))
        r = reward(fam, np.array([0.5]), np.array([1.0, 0.0, 1.5]), np.array([2.0]))
        assert r == pytest.approx(-1.0 - 0.04)

    def test_batched_psi_rows(self):
        fam = TaskFamily("goal-velocity-1d")
        s = np.zeros((3, 4))
        s[:, 2] = 1.0
        r = reward(fam, np.array([[0.0], [1.0], [2.0]]), s, np.zeros((3, 2)))
        np.testing.assert_array_equal(r, [-1.0, 0.0, -1.0])

    @settings(max_examples=300, deadline=None)
    @given(st.floats(0, 2), st.floats(0, 2), st.floats(-5, 5), st.floats(-1, 1))
    def test_lipschitz_in_psi_1d(self, p1, p2, v, a):
        fam = TaskFamily("goal-velocity-1d")
        s, act = np.array([0, 0, v, 0.0]), np.array([a, 0.0])
        gap = abs(reward(fam, np.array([p1]), s, act) - reward(fam, np.array([p2]), s, act))
        assert gap <= abs(p1 - p2) + 1e-12

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.floats(-1, 1), min_size=4, max_size=4),
           st.lists(st.floats(-3, 3), min_size=2, max_size=2))
    def test_lipschitz_in_psi_2d(self, psis, v):
        fam = TaskFamily("goal-velocity-2d", low=(-1.0, -1.0), high=(1.0, 1.0))
        s = np.array([0, 0, *v])
        p1, p2 = np.array(psis[:2]), np.array(psis[2:])
        gap = abs(reward(fam, p1, s, np.zeros(2)) - reward(fam, p2, s, np.zeros(2)))
        assert gap <= np.abs(p1 - p2).sum() + 1e-12


class TestTasks:
    def test_forward_backward_frequency(self):
        fam = TaskFamily("forward-backward", low=(-1.0,), high=(1.0,))
        rng = np.random.default_rng(0)
        draws = np.array([sample_task(fam, rng).psi[0] for _ in range(10_000)])
        assert set(np.unique(draws)) == {-1.0, 1.0}
        assert abs((draws == 1.0).mean() - 0.5) <= 0.02

    def test_interval_support(self):
        fam = TaskFamily("goal-velocity-1d")
        rng = np.random.default_rng(1)
        assert all(0 <= sample_task(fam, rng).psi[0] <= 2 for _ in range(2000))

    def test_seeded_draw(self):
        fam = TaskFamily("goal-velocity-2d", low=(-1.0, -1.0), high=(1.0, 1.0))
        a = sample_task(fam, np.random.default_rng(9)).psi
        b = sample_task(fam, np.random.default_rng(9)).psi
        assert np.array_equal(a, b)

    def test_out_of_family_rejected(self):
        with pytest.raises(ValueError):
            Task(np.array([3.0]), TaskFamily("goal-velocity-1d"))

    def test_bad_family(self):
        with pytest.raises(ValueError):
            TaskFamily("goal-velocity-1d", low=(2.0,), high=(0.0,))
        with pytest.raises(ValueError):
            TaskFamily("forward-backward", body="pendulum", low=(-1.0,), high=(1.0,))

    def test_spec_invariants(self):
        with pytest.raises(ValueError):
            make_spec("point-mass", horizon=0)
        with pytest.raises(ValueError):
            make_spec("point-mass", gamma=1.0)
