"""Comparison methods: first-order MAML over policy initializations, and an
oracle policy that receives the task parameter as input."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapt import AdaptationCurve, evaluate_task
from .config import HyperConfig, MamlConfig
from .envs import DynamicsVariant, MDPSpec, Task, TaskFamily, make_spec, sample_task
from .seeding import substream
from .trainer import Learner, SampleCounter, new_learner, policy_update
from .trpo import GaussianPolicy, discounted_cumsum
from .virtualenv import Trajectory, collect_samples, real_dynamics, rollout


def policy_gradient(policy: GaussianPolicy, trajs: list[Trajectory], gamma: float,
                    normalize: bool = True) -> np.ndarray:
    """Likelihood-ratio gradient with a per-timestep mean baseline.

    Returns the flat gradient of ``mean_samples[log pi(a|s) * (G_t - b_t)]``
    where ``G_t`` is the discounted return-to-go and ``b_t`` its mean over
    trajectories at step t. With ``normalize`` the advantages are scaled to
    zero mean and unit variance first.
    """
    rtg = [discounted_cumsum(t.rewards, gamma) for t in trajs]
    horizon = max(len(g) for g in rtg)
    padded = np.full((len(rtg), horizon), np.nan)
    for i, g in enumerate(rtg):
        padded[i, :len(g)] = g
    base = np.nanmean(padded, axis=0)
    adv = np.concatenate([g - base[:len(g)] for g in rtg])
    if normalize and adv.size > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    obs = np.concatenate([t.states for t in trajs])
    acts = np.concatenate([t.actions for t in trajs])
    mu, cache = policy.net.forward_cache(obs)
    var = policy.std ** 2
    diff = acts - mu
    w = adv[:, None] / adv.size
    grads, _ = policy.net.backward(cache, w * diff / var)
    g_ls = np.sum(w * (diff * diff / var - 1.0), axis=0)
    return np.concatenate([np.concatenate([g.ravel() for g in grads]), g_ls])


def _step_size(cfg: MamlConfig, i: int) -> float:
    return cfg.alpha if i == 0 else cfg.alpha_later


@dataclass
class MamlAdaptResult:
    policy: GaussianPolicy
    curve: AdaptationCurve
    counter: SampleCounter


def maml_adapt(policy: GaussianPolicy, task: Task, spec: MDPSpec, variant: DynamicsVariant,
               cfg: MamlConfig, hyper: HyperConfig, seed: int, task_id: int = 0,
               n_grad_steps: int | None = None, rollouts: int | None = None,
               evaluate: bool = True) -> MamlAdaptResult:
    """Gradient-step adaptation from a shared initialization.

    Step i collects ``rollouts`` real episodes, estimates the policy gradient
    and ascends with alpha (first step) or alpha_later. Each curve point is
    evaluated on the same evaluation stream so points are comparable.
    """
    n_grad_steps = cfg.n_grad_steps if n_grad_steps is None else n_grad_steps
    rollouts = cfg.rollouts if rollouts is None else rollouts
    pol = policy.copy()
    counter = SampleCounter()
    rng = substream(seed, "maml-adapt", task_id)
    curve = AdaptationCurve(task_id, [float(x) for x in task.psi], method="maml")

    def point():
        if evaluate:
            curve.add(counter.real, evaluate_task(pol, spec, variant, task, hyper, seed, task_id))

    point()
    dyn = real_dynamics(spec, variant)
    for i in range(n_grad_steps):
        trajs = rollout(pol, dyn, spec, task, rollouts, rng, state_clip=None)
        counter.real += sum(len(t) for t in trajs)
        g = policy_gradient(pol, trajs, hyper.trpo.gamma)
        pol.set_flat(pol.get_flat() + _step_size(cfg, i) * g)
        point()
    return MamlAdaptResult(pol, curve, counter)


@dataclass
class MamlTrainResult:
    policy: GaussianPolicy
    counter: SampleCounter
    pre_returns: list[float]
    post_returns: list[float]


def maml_metatrain(family: TaskFamily, variant: DynamicsVariant, cfg: MamlConfig,
                   hyper: HyperConfig, seed: int) -> MamlTrainResult:
    """First-order MAML: ascend the average post-adaptation gradient."""
    spec = make_spec(family.body, hyper.horizon, hyper.trpo.gamma)
    policy = new_learner(spec, hyper, substream(seed, "maml-init")).policy
    counter = SampleCounter()
    dyn = real_dynamics(spec, variant)
    pre_log, post_log = [], []
    for it in range(cfg.meta_iters):
        rng = substream(seed, "maml-meta", it)
        meta_grad = np.zeros(policy.n_params)
        pre, post = [], []
        for _ in range(cfg.meta_batch):
            task = sample_task(family, rng)
            trajs = rollout(policy, dyn, spec, task, cfg.rollouts, rng, state_clip=None)
            counter.real += sum(len(t) for t in trajs)
            adapted = policy.copy()
            adapted.set_flat(policy.get_flat()
                             + cfg.alpha * policy_gradient(policy, trajs, hyper.trpo.gamma))
            trajs2 = rollout(adapted, dyn, spec, task, cfg.rollouts, rng, state_clip=None)
            counter.real += sum(len(t) for t in trajs2)
            meta_grad += policy_gradient(adapted, trajs2, hyper.trpo.gamma)
            pre.append(np.mean([t.ret for t in trajs]))
            post.append(np.mean([t.ret for t in trajs2]))
        policy.set_flat(policy.get_flat() + cfg.beta * meta_grad / cfg.meta_batch)
        pre_log.append(float(np.mean(pre)))
        post_log.append(float(np.mean(post)))
    return MamlTrainResult(policy, counter, pre_log, post_log)


# ------------------------------------------------------------------- oracle

class ConditionedPolicy:
    """Presents a policy over (state, psi) as a policy over states."""

    def __init__(self, policy: GaussianPolicy, psi: np.ndarray):
        self.policy = policy
        self.psi = np.asarray(psi, dtype=np.float64)

    def _obs(self, s: np.ndarray) -> np.ndarray:
        psi = np.broadcast_to(self.psi, s.shape[:-1] + (self.psi.shape[-1],))
        return np.concatenate([s, psi], axis=-1)

    def mean(self, s: np.ndarray) -> np.ndarray:
        return self.policy.mean(self._obs(s))

    def sample(self, s: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return self.policy.sample(self._obs(s), rng)


class MultiTask:
    """One task parameter per trajectory row, for lock-step rollouts."""

    def __init__(self, family: TaskFamily, psis: np.ndarray):
        from .envs import reward
        self._reward = reward
        self.family = family
        self.psis = np.asarray(psis, dtype=np.float64)

    def reward(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        return self._reward(self.family, self.psis, s, a)


@dataclass
class OracleResult:
    learner: Learner
    counter: SampleCounter
    iterations: int

    @property
    def policy(self) -> GaussianPolicy:
        return self.learner.policy

    def for_task(self, task: Task) -> ConditionedPolicy:
        return ConditionedPolicy(self.learner.policy, task.psi)


def oracle_train(family: TaskFamily, variant: DynamicsVariant, hyper: HyperConfig, budget: int,
                 seed: int) -> OracleResult:
    """TRPO on the real environment with psi resampled per episode and fed as
    input, until ``budget`` real samples are spent."""
    spec = make_spec(family.body, hyper.horizon, hyper.trpo.gamma)
    learner = new_learner(spec, hyper, substream(seed, "oracle-init"),
                          obs_dim=spec.state_dim + family.psi_dim)
    counter = SampleCounter()
    dyn = real_dynamics(spec, variant)
    it = 0
    while counter.real < budget:
        rng = substream(seed, "oracle", it)
        n = min(hyper.n_collect, budget - counter.real)
        n_traj = -(-n // spec.horizon)
        psis = np.stack([sample_task(family, rng).psi for _ in range(n_traj)])
        trajs = collect_samples(ConditionedPolicy(learner.policy, psis), dyn, spec,
                                MultiTask(family, psis), n, rng, state_clip=None)
        counter.real += sum(len(t) for t in trajs)
        aug = [Trajectory(np.concatenate([t.states, np.broadcast_to(psis[i], (len(t), psis.shape[1]))],
                                         axis=1),
                          t.actions, t.next_states, t.rewards, t.diverged)
               for i, t in enumerate(trajs)]
        policy_update(learner, aug, hyper, rng)
        it += 1
    return OracleResult(learner, counter, it)


def oracle_curve(oracle: OracleResult, task: Task, spec: MDPSpec, variant: DynamicsVariant,
                 hyper: HyperConfig, seed: int, task_id: int, samples: list[int]
                 ) -> AdaptationCurve:
    """The oracle does not adapt: one evaluation repeated on the shared sample axis."""
    ev = evaluate_task(oracle.for_task(task), spec, variant, task, hyper, seed, task_id)
    curve = AdaptationCurve(task_id, [float(x) for x in task.psi], method="oracle")
    for s in samples:
        curve.add(s, ev)
    return curve
