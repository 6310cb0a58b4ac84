"""Analytic continuous-control environments and reward-varying task families.

Two bodies share the same interface: a 2-D point mass with linear drag and
a torque-driven pendulum. Dynamics never depend on the task; only the
reward does.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

POINT_MASS = "point-mass"
PENDULUM = "pendulum"

GOAL_VELOCITY_1D = "goal-velocity-1d"
GOAL_VELOCITY_2D = "goal-velocity-2d"
FORWARD_BACKWARD = "forward-backward"
FAMILY_KINDS = (GOAL_VELOCITY_1D, GOAL_VELOCITY_2D, FORWARD_BACKWARD)

POINT_MASS_CTRL = 0.05
PENDULUM_CTRL = 0.01


@dataclass(frozen=True)
class MDPSpec:
    body: str
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    horizon: int = 50
    gamma: float = 0.99

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if np.any(np.asarray(self.action_low) > np.asarray(self.action_high)):
            raise ValueError("action bounds are not well ordered")

    def clip_action(self, a: np.ndarray) -> np.ndarray:
        return np.clip(a, self.action_low, self.action_high)


def make_spec(body: str, horizon: int = 50, gamma: float = 0.99) -> MDPSpec:
    if body == POINT_MASS:
        return MDPSpec(body, 4, 2, -np.ones(2), np.ones(2), horizon, gamma)
    if body == PENDULUM:
        return MDPSpec(body, 3, 1, -2.0 * np.ones(1), 2.0 * np.ones(1), horizon, gamma)
    raise ValueError(f"unknown body {body!r}")


@dataclass(frozen=True)
class DynamicsVariant:
    name: str
    drag: float
    gains: tuple[float, ...]
    dt: float = 0.05

    def __post_init__(self):
        if self.drag < 0 or self.dt <= 0:
            raise ValueError("drag must be >= 0 and dt > 0")
        if any(not 0.0 <= g <= 1.0 for g in self.gains):
            raise ValueError("actuator gains must lie in [0, 1]")


NOMINAL_DRAG = {POINT_MASS: 0.1, PENDULUM: 0.05}


def make_variant(body: str, name: str = "nominal") -> DynamicsVariant:
    """``nominal``, ``low-friction`` (drag halved) or ``crippled`` (first actuator off)."""
    n_act = make_spec(body).action_dim
    drag = NOMINAL_DRAG[body]
    gains = [1.0] * n_act
    if name == "low-friction":
        drag = drag / 2
    elif name == "crippled":
        gains[0] = 0.0
    elif name != "nominal":
        raise ValueError(f"unknown dynamics variant {name!r}")
    return DynamicsVariant(name, drag, tuple(gains))


def reset(spec: MDPSpec, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Sample initial states; ``n`` gives a batch of shape (n, state_dim)."""
    size = 1 if n is None else n
    if spec.body == POINT_MASS:
        s = np.zeros((size, 4))
        s[:, 2:] = rng.uniform(-0.05, 0.05, size=(size, 2))
    else:
        # angle ~ U(-pi, pi], omega ~ U(-0.5, 0.5)
        theta = np.pi - rng.uniform(0.0, 2 * np.pi, size=size)
        omega = rng.uniform(-0.5, 0.5, size=size)
        s = np.stack([np.cos(theta), np.sin(theta), omega], axis=-1)
    return s[0] if n is None else s


def step_dynamics(spec: MDPSpec, variant: DynamicsVariant, state: np.ndarray,
                  action: np.ndarray) -> np.ndarray:
    """One deterministic Euler step; works on single states or batches."""
    s = np.asarray(state, dtype=np.float64)
    a = spec.clip_action(np.asarray(action, dtype=np.float64))
    if not np.all(np.isfinite(s)):
        raise FloatingPointError("non-finite state passed to step_dynamics")
    gains = np.asarray(variant.gains)
    dt = variant.dt
    if spec.body == POINT_MASS:
        p, v = s[..., :2], s[..., 2:]
        v_new = v + dt * (gains * a - variant.drag * v)
        p_new = p + dt * v_new
        return np.concatenate([p_new, v_new], axis=-1)
    g, length, mass = 9.8, 1.0, 1.0
    cos_t, sin_t, omega = s[..., 0], s[..., 1], s[..., 2]
    theta = np.arctan2(sin_t, cos_t)
    torque = gains[0] * a[..., 0]
    acc = -(g / length) * sin_t - variant.drag * omega + torque / (mass * length ** 2)
    omega_new = np.clip(omega + dt * acc, -8.0, 8.0)
    theta_new = theta + dt * omega_new
    return np.stack([np.cos(theta_new), np.sin(theta_new), omega_new], axis=-1)


@dataclass(frozen=True)
class TaskFamily:
    kind: str
    body: str = POINT_MASS
    low: tuple[float, ...] = (0.0,)
    high: tuple[float, ...] = (2.0,)

    def __post_init__(self):
        if self.kind not in FAMILY_KINDS:
            raise ValueError(f"unknown family kind {self.kind!r}")
        if self.kind == GOAL_VELOCITY_2D and self.body != POINT_MASS:
            raise ValueError("goal-velocity-2d needs the point-mass body")
        if self.kind == FORWARD_BACKWARD and self.body != POINT_MASS:
            raise ValueError("forward-backward needs the point-mass body")
        if len(self.low) != len(self.high) or any(lo > hi for lo, hi in zip(self.low, self.high)):
            raise ValueError("task parameter bounds are not well ordered")
        if len(self.low) != self.psi_dim:
            raise ValueError(f"{self.kind} expects {self.psi_dim}-dimensional bounds")

    @property
    def psi_dim(self) -> int:
        return 2 if self.kind == GOAL_VELOCITY_2D else 1

    def contains(self, psi: np.ndarray) -> bool:
        psi = np.atleast_1d(psi)
        if self.kind == FORWARD_BACKWARD:
            return bool(psi[0] in (-1.0, 1.0))
        return bool(np.all(psi >= np.asarray(self.low)) and np.all(psi <= np.asarray(self.high)))


@dataclass(frozen=True)
class Task:
    psi: np.ndarray = field(compare=False)
    family: TaskFamily

    def __post_init__(self):
        object.__setattr__(self, "psi", np.atleast_1d(np.asarray(self.psi, dtype=np.float64)))
        if not self.family.contains(self.psi):
            raise ValueError(f"task parameter {self.psi} outside the family's set")

    def reward(self, state: np.ndarray, action: np.ndarray) -> np.ndarray:
        return reward(self.family, self.psi, state, action)

    def with_family(self, family: TaskFamily) -> "Task":
        return replace(self, family=family)


def sample_task(family: TaskFamily, rng: np.random.Generator) -> Task:
    if family.kind == FORWARD_BACKWARD:
        psi = np.array([1.0 if rng.random() < 0.5 else -1.0])
    else:
        psi = rng.uniform(np.asarray(family.low), np.asarray(family.high))
    return Task(psi, family)


def reward(family: TaskFamily, psi: np.ndarray, state: np.ndarray,
           action: np.ndarray) -> np.ndarray:
    """Analytic reward r_psi(s, a); batched over leading dimensions.

    ``psi`` is either one parameter vector or one row per state.
    """
    s = np.asarray(state, dtype=np.float64)
    a = np.asarray(action, dtype=np.float64)
    psi = np.atleast_1d(np.asarray(psi, dtype=np.float64))
    if family.body == PENDULUM:
        return -np.abs(s[..., 2] - psi[..., 0]) - PENDULUM_CTRL * np.sum(a * a, axis=-1)
    ctrl = POINT_MASS_CTRL * np.sum(a * a, axis=-1)
    if family.kind == GOAL_VELOCITY_1D:
        return -np.abs(s[..., 2] - psi[..., 0]) - ctrl
    if family.kind == GOAL_VELOCITY_2D:
        return -np.sum(np.abs(s[..., 2:4] - psi), axis=-1) - ctrl
    return psi[..., 0] * s[..., 2] - ctrl
