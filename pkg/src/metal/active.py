"""Task difficulty ratings and the quantile skip rule for active task selection."""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np

from .envs import DynamicsVariant, MDPSpec, Task
from .virtualenv import STATE_CLIP, estimate_return, real_dynamics


@dataclass
class TaskRating:
    psi: np.ndarray
    mu: float
    method: str  # "true" | "estimated"
    returns: tuple[float, ...] = ()
    real_samples: int = 0


def _synced(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1))


def rate_true(task: Task, policy, model, spec: MDPSpec, variant: DynamicsVariant,
              n_rollouts: int, rng: np.random.Generator, counter=None) -> TaskRating:
    """Virtual minus real return of the post-warm-up policy.

    Both estimates draw from generators seeded identically, so an exact
    model gives a rating of exactly zero. Real rollouts are charged to
    ``counter``.
    """
    seed = _synced(rng)
    virt = estimate_return(policy, lambda s, a: model.predict(s, a, check=False), spec, task,
                           n_rollouts, np.random.default_rng(seed), state_clip=STATE_CLIP)
    real = estimate_return(policy, real_dynamics(spec, variant), spec, task, n_rollouts,
                           np.random.default_rng(seed), state_clip=STATE_CLIP)
    used = real.steps
    if counter is not None:
        counter.real += used
    return TaskRating(task.psi, virt.mean - real.mean, "true", (virt.mean, real.mean), used)


def pairwise_gap(returns: Sequence[float]) -> float:
    """Mean absolute difference over all unordered pairs."""
    if len(returns) < 2:
        raise ValueError("need at least two model snapshots to estimate a rating")
    return float(np.mean([abs(a - b) for a, b in combinations(returns, 2)]))


def rate_estimated(task: Task, policy, snapshots: Sequence, spec: MDPSpec, n_rollouts: int,
                   rng: np.random.Generator) -> TaskRating:
    """Disagreement between model snapshots; consumes no real samples."""
    if len(snapshots) < 2:
        raise ValueError("need at least two model snapshots to estimate a rating")
    seed = _synced(rng)
    rets = [estimate_return(policy, lambda s, a, m=m: m.predict(s, a, check=False), spec, task,
                            n_rollouts, np.random.default_rng(seed)).mean for m in snapshots]
    return TaskRating(task.psi, pairwise_gap(rets), "estimated", tuple(rets), 0)


@dataclass
class SkipRule:
    """Skip a task when its rating is strictly below the q-quantile of the
    reference ratings (the most recent ``warm_start`` ones, or the first)."""
    quantile: float = 0.5
    warm_start: int = 5
    window: str = "latest"
    history: list[float] = field(default_factory=list)

    def reference(self) -> list[float]:
        if self.window == "first":
            return self.history[:self.warm_start]
        return self.history[-self.warm_start:]

    def threshold(self) -> float | None:
        if len(self.history) < self.warm_start:
            return None
        return float(np.quantile(np.asarray(self.reference()), self.quantile))


def should_skip(rule: SkipRule, mu: float) -> bool:
    """Decide for a new rating and record it in the rule's history."""
    thr = rule.threshold()
    rule.history.append(float(mu))
    return thr is not None and mu < thr
