"""Gaussian MLP policy, value baseline, GAE and the trust-region policy step."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .ndmath import MLP, Adam, conjugate_gradient

log = logging.getLogger(__name__)

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
LOG_2PI = np.log(2.0 * np.pi)


class GaussianPolicy:
    """Diagonal Gaussian with an MLP mean and a state-independent log-std."""

    def __init__(self, obs_dim: int, act_dim: int, hidden: Sequence[int] = (32, 32),
                 rng: np.random.Generator | None = None, init_log_std: float = -0.5,
                 out_scale: float = 0.01):
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.net = MLP([obs_dim, *hidden, act_dim], rng, out_scale=out_scale)
        self.log_std = np.full(act_dim, float(init_log_std))

    def copy(self) -> "GaussianPolicy":
        new = GaussianPolicy.__new__(GaussianPolicy)
        new.obs_dim, new.act_dim = self.obs_dim, self.act_dim
        new.net = self.net.copy()
        new.log_std = self.log_std.copy()
        return new

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    def mean(self, obs: np.ndarray) -> np.ndarray:
        return self.net(obs)

    def sample(self, obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        mu = self.mean(obs)
        return mu + self.std * rng.standard_normal(mu.shape)

    def log_prob(self, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        z = (actions - self.mean(obs)) / self.std
        return -0.5 * np.sum(z * z, axis=-1) - np.sum(self.log_std) - 0.5 * self.act_dim * LOG_2PI

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.net.get_flat(), self.log_std])

    def set_flat(self, flat: np.ndarray) -> None:
        n = self.net.n_params
        self.net.set_flat(flat[:n])
        self.log_std = np.clip(np.array(flat[n:], dtype=np.float64), LOG_STD_MIN, LOG_STD_MAX)

    @property
    def n_params(self) -> int:
        return self.net.n_params + self.act_dim


def gaussian_kl(mu_old, log_std_old, mu_new, log_std_new) -> np.ndarray:
    """Per-row KL(old || new) between diagonal Gaussians."""
    var_old = np.exp(2 * log_std_old)
    var_new = np.exp(2 * log_std_new)
    return np.sum(log_std_new - log_std_old
                  + (var_old + (mu_old - mu_new) ** 2) / (2 * var_new) - 0.5, axis=-1)


class ValueBaseline:
    def __init__(self, obs_dim: int, hidden: Sequence[int] = (32, 32),
                 rng: np.random.Generator | None = None, lr: float = 3e-3):
        self.net = MLP([obs_dim, *hidden, 1], rng)
        self.adam = Adam(self.net.params, lr=lr)

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        return self.net(obs)[..., 0]


def fit_baseline(baseline: ValueBaseline, states: np.ndarray, targets: np.ndarray,
                 epochs: int, batch_size: int = 512,
                 rng: np.random.Generator | None = None) -> float:
    """MSE regression of the baseline onto ``targets``; returns the final loss."""
    states = np.asarray(states, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    rng = rng if rng is not None else np.random.default_rng(0)
    n = states.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            idx = order[i:i + batch_size]
            out, cache = baseline.net.forward_cache(states[idx])
            err = out[:, 0] - targets[idx]
            grads, _ = baseline.net.backward(cache, (2.0 / idx.size) * err[:, None])
            baseline.adam.step(baseline.net.params, grads)
    return float(np.mean((baseline(states) - targets) ** 2))


def discounted_cumsum(x: np.ndarray, gamma: float) -> np.ndarray:
    out = np.zeros_like(x, dtype=np.float64)
    acc = 0.0
    for t in range(len(x) - 1, -1, -1):
        acc = x[t] + gamma * acc
        out[t] = acc
    return out


def gae_advantages(trajectories, baseline: Callable[[np.ndarray], np.ndarray], gamma: float,
                   lam: float, normalize: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Concatenated GAE advantages and discounted return-to-go value targets.

    Trajectories end either by the horizon or by the divergence guard; both
    are treated as terminal (no bootstrap past the last step).
    """
    advs, targets = [], []
    for tr in trajectories:
        r = np.asarray(tr.rewards, dtype=np.float64)
        v = np.asarray(baseline(tr.states), dtype=np.float64)
        v_next = np.append(v[1:], 0.0)
        delta = r + gamma * v_next - v
        advs.append(discounted_cumsum(delta, gamma * lam))
        targets.append(discounted_cumsum(r, gamma))
    adv = np.concatenate(advs) if advs else np.zeros(0)
    tgt = np.concatenate(targets) if targets else np.zeros(0)
    if normalize and adv.size:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv, tgt


@dataclass(frozen=True)
class TrustRegionConfig:
    max_kl: float = 0.01
    cg_iters: int = 10
    damping: float = 0.1
    backtrack_coef: float = 0.8
    backtrack_steps: int = 10
    gae_lambda: float = 0.95
    gamma: float = 0.99
    baseline_epochs: int = 5
    # Fisher products use every fvp_stride-th sample of the batch
    fvp_stride: int = 5

    def __post_init__(self):
        if self.max_kl <= 0:
            raise ValueError("max_kl must be > 0")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if self.fvp_stride < 1:
            raise ValueError("fvp_stride must be >= 1")


@dataclass
class TRPOInfo:
    accepted: bool
    surrogate_change: float
    kl: float
    backtracks: int
    incident: str = ""


class _PolicyBatch:
    """Surrogate, KL and Fisher products for one fixed batch around the old policy."""

    def __init__(self, policy: GaussianPolicy, obs, actions, advantages, fvp_stride: int = 1):
        self.policy = policy
        self.fvp_obs = obs[::fvp_stride]
        self.obs, self.actions, self.adv = obs, actions, advantages
        self.n = obs.shape[0]
        self.old_flat = policy.get_flat()
        self.mu_old = policy.mean(obs)
        self.log_std_old = policy.log_std.copy()
        self.logp_old = policy.log_prob(obs, actions)
        self._cache = None

    def _with(self, flat) -> GaussianPolicy:
        p = self.policy.copy()
        p.set_flat(flat)
        return p

    def surrogate(self, flat) -> float:
        p = self._with(flat)
        ratio = np.exp(p.log_prob(self.obs, self.actions) - self.logp_old)
        return float(np.mean(ratio * self.adv))

    def kl(self, flat) -> float:
        p = self._with(flat)
        return float(np.mean(gaussian_kl(self.mu_old, self.log_std_old,
                                         p.mean(self.obs), p.log_std)))

    def surrogate_grad(self) -> np.ndarray:
        pol = self.policy
        mu, cache = pol.net.forward_cache(self.obs)
        var = np.exp(2 * pol.log_std)
        diff = self.actions - mu
        w = self.adv[:, None] / self.n
        g_mu = w * diff / var
        grads, _ = pol.net.backward(cache, g_mu)
        g_ls = np.sum(w * (diff * diff / var - 1.0), axis=0)
        return np.concatenate([np.concatenate([g.ravel() for g in grads]), g_ls])

    def fisher_vector_product(self, v: np.ndarray) -> np.ndarray:
        """Exact Fisher (Hessian of the mean KL at the old policy) times ``v``."""
        pol = self.policy
        if self._cache is None:
            _, self._cache = pol.net.forward_cache(self.fvp_obs)
        n_net = pol.net.n_params
        dmu = pol.net.jvp(self.fvp_obs, pol.net.unflatten(v[:n_net]), self._cache)
        var = np.exp(2 * pol.log_std)
        grads, _ = pol.net.backward(self._cache, dmu / var / self.fvp_obs.shape[0])
        return np.concatenate([np.concatenate([g.ravel() for g in grads]), 2.0 * v[n_net:]])


def trpo_step(policy: GaussianPolicy, obs: np.ndarray, actions: np.ndarray,
              advantages: np.ndarray, config: TrustRegionConfig = TrustRegionConfig()
              ) -> TRPOInfo:
    """One natural-gradient step with backtracking line search (in place).

    The policy is left unchanged if no candidate satisfies both the KL
    bound and a non-negative surrogate change.
    """
    if obs.shape[0] == 0:
        raise ValueError("empty TRPO batch")
    batch = _PolicyBatch(policy, obs, actions, np.asarray(advantages, dtype=np.float64),
                         config.fvp_stride)
    g = batch.surrogate_grad()
    if not np.all(np.isfinite(g)):
        log.warning("non-finite policy gradient; step rejected")
        return TRPOInfo(False, 0.0, 0.0, 0, "non-finite gradient")
    if not np.any(g):
        return TRPOInfo(False, 0.0, 0.0, 0, "zero gradient")

    def fvp(v):
        return batch.fisher_vector_product(v) + config.damping * v

    direction, _, _ = conjugate_gradient(fvp, g, config.cg_iters)
    shs = float(direction @ fvp(direction))
    if not np.isfinite(shs) or shs <= 0:
        log.warning("degenerate natural-gradient curvature %s; step rejected", shs)
        return TRPOInfo(False, 0.0, 0.0, 0, "degenerate curvature")
    full_step = np.sqrt(2.0 * config.max_kl / shs) * direction
    old = batch.old_flat
    surr_old = batch.surrogate(old)
    for i in range(config.backtrack_steps):
        frac = config.backtrack_coef ** i
        cand = old + frac * full_step
        surr = batch.surrogate(cand)
        if not np.isfinite(surr):
            log.warning("non-finite surrogate in line search; step rejected")
            policy.set_flat(old)
            return TRPOInfo(False, 0.0, 0.0, i, "non-finite surrogate")
        kl = batch.kl(cand)
        if kl <= config.max_kl and surr - surr_old >= 0.0:
            policy.set_flat(cand)
            return TRPOInfo(True, surr - surr_old, kl, i)
    policy.set_flat(old)
    return TRPOInfo(False, 0.0, 0.0, config.backtrack_steps, "line search exhausted")
