"""Policy rollouts through real or learned dynamics, and return estimation.

Real and virtual rollouts share one code path: only the dynamics callable
differs, so substituting the true dynamics for the model reproduces the
real rollout bit for bit under the same generator.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import partial
from typing import Callable

import numpy as np

from .envs import DynamicsVariant, MDPSpec, Task, reset, step_dynamics

STATE_CLIP = 100.0

Dynamics = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray  # unclipped policy samples
    next_states: np.ndarray
    rewards: np.ndarray
    diverged: bool = False

    def __len__(self) -> int:
        return self.rewards.shape[0]

    @property
    def ret(self) -> float:
        return float(np.sum(self.rewards))


@dataclass(frozen=True)
class VirtualRolloutConfig:
    horizon: int = 50
    n_trpo: int = 1000

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.n_trpo < self.horizon:
            raise ValueError("n_trpo must be >= horizon")


def real_dynamics(spec: MDPSpec, variant: DynamicsVariant) -> Dynamics:
    return partial(step_dynamics, spec, variant)


def rollout(policy, dynamics: Dynamics, spec: MDPSpec, task: Task, n_traj: int,
            rng: np.random.Generator, horizon: int | None = None,
            state_clip: float | None = STATE_CLIP, deterministic: bool = False
            ) -> list[Trajectory]:
    """Run ``n_traj`` trajectories in lock-step.

    Rewards are the analytic task reward of (state, clipped action). A
    trajectory whose next state leaves ``±state_clip`` or stops being finite
    ends there and is flagged ``diverged``; the offending step is kept when
    finite so it still carries its (low) reward.
    """
    h = spec.horizon if horizon is None else horizon
    s = reset(spec, rng, n_traj)
    S = np.zeros((n_traj, h, spec.state_dim))
    A = np.zeros((n_traj, h, spec.action_dim))
    S2 = np.zeros((n_traj, h, spec.state_dim))
    R = np.zeros((n_traj, h))
    length = np.full(n_traj, h)
    diverged = np.zeros(n_traj, dtype=bool)
    alive = np.ones(n_traj, dtype=bool)
    for t in range(h):
        a = policy.mean(s) if deterministic else policy.sample(s, rng)
        a_env = spec.clip_action(a)
        with np.errstate(all="ignore"):
            try:
                s2 = dynamics(s, a_env)
            except FloatingPointError:
                s2 = np.full_like(s, np.nan)
        finite = np.all(np.isfinite(s2), axis=-1)
        S[:, t], A[:, t], R[:, t] = s, a, task.reward(s, a_env)
        S2[:, t] = np.where(finite[:, None], s2, s)
        bad_nan = alive & ~finite
        length[bad_nan] = t
        diverged[bad_nan] = True
        alive &= finite
        if state_clip is not None:
            out = alive & np.any(np.abs(s2) > state_clip, axis=-1)
            length[out] = t + 1
            diverged[out] = True
            alive &= ~out
        if not alive.any():
            break
        s = np.where(alive[:, None], S2[:, t], s)
    return [Trajectory(S[i, :length[i]].copy(), A[i, :length[i]].copy(),
                       S2[i, :length[i]].copy(), R[i, :length[i]].copy(), bool(diverged[i]))
            for i in range(n_traj)]


def collect_samples(policy, dynamics: Dynamics, spec: MDPSpec, task: Task, n_samples: int,
                    rng: np.random.Generator, state_clip: float | None = STATE_CLIP
                    ) -> list[Trajectory]:
    """Trajectories totalling ``n_samples`` transitions when none diverge.

    The last trajectory is cut short if ``n_samples`` is not a multiple of
    the horizon.
    """
    h = spec.horizon
    n_traj = -(-n_samples // h)
    trajs = rollout(policy, dynamics, spec, task, n_traj, rng, h, state_clip)
    extra = n_traj * h - n_samples
    if extra and trajs:
        last = trajs[-1]
        keep = min(len(last), h - extra)
        trajs[-1] = Trajectory(last.states[:keep], last.actions[:keep], last.next_states[:keep],
                               last.rewards[:keep], last.diverged)
    return [t for t in trajs if len(t)]


def virtual_rollout(policy, model, spec: MDPSpec, task: Task, rng: np.random.Generator,
                    n_traj: int = 1) -> list[Trajectory]:
    """Rollouts inside the learned model starting from fresh initial states."""
    return rollout(policy, partial(model.predict, check=False), spec, task, n_traj, rng)


@dataclass
class ReturnEstimate:
    mean: float
    stderr: float
    returns: np.ndarray
    steps: int = 0


def estimate_return(policy, dynamics: Dynamics, spec: MDPSpec, task: Task, n_rollouts: int,
                    rng: np.random.Generator, state_clip: float | None = STATE_CLIP,
                    deterministic: bool = False) -> ReturnEstimate:
    """Mean undiscounted horizon return over ``n_rollouts`` episodes."""
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    trajs = rollout(policy, dynamics, spec, task, n_rollouts, rng, state_clip=state_clip,
                    deterministic=deterministic)
    rets = np.array([t.ret for t in trajs])
    se = float(rets.std(ddof=1) / np.sqrt(rets.size)) if rets.size > 1 else 0.0
    return ReturnEstimate(float(rets.mean()), se, rets, sum(len(t) for t in trajs))
