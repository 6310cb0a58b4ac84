"""Learned dynamics model, k-step prediction loss and the transition dataset."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Sequence

import numpy as np

from .ndmath import MLP, Adam, FormatError, NonFiniteError, read_arrays, write_arrays

DS_MAGIC = b"METALDS1"
STD_FLOOR = 1e-6
NORM_EPS = 1e-12


class Normalizer:
    """Mean/std statistics for states, actions and state differences.

    Statistics are recomputed from the whole dataset on ``refresh``; the
    state difference is only scaled (never shifted) so a zero network output
    maps to a zero predicted change.
    """

    def __init__(self, state_dim: int, action_dim: int):
        self.state_mean = np.zeros(state_dim)
        self.state_std = np.ones(state_dim)
        self.action_mean = np.zeros(action_dim)
        self.action_std = np.ones(action_dim)
        self.diff_std = np.ones(state_dim)
        self.count = 0

    def refresh(self, dataset: "TransitionDataset") -> None:
        if len(dataset) == 0:
            raise ValueError("cannot fit normalizer on an empty dataset")
        s, a, s2 = dataset.states, dataset.actions, dataset.next_states
        self.state_mean = s.mean(axis=0)
        self.state_std = np.maximum(s.std(axis=0), STD_FLOOR)
        self.action_mean = a.mean(axis=0)
        self.action_std = np.maximum(a.std(axis=0), STD_FLOOR)
        self.diff_std = np.maximum((s2 - s).std(axis=0), STD_FLOOR)
        self.count = len(dataset)

    def normalize(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        return np.concatenate([(s - self.state_mean) / self.state_std,
                               (a - self.action_mean) / self.action_std], axis=-1)

    def denormalize(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ds = self.state_mean.size
        return (x[..., :ds] * self.state_std + self.state_mean,
                x[..., ds:] * self.action_std + self.action_mean)

    def arrays(self) -> list[np.ndarray]:
        return [self.state_mean, self.state_std, self.action_mean, self.action_std,
                self.diff_std, np.array([float(self.count)])]

    def load_arrays(self, arrays: Sequence[np.ndarray]) -> None:
        (self.state_mean, self.state_std, self.action_mean, self.action_std,
         self.diff_std) = (np.array(a) for a in arrays[:5])
        self.count = int(arrays[5][0])


class DynamicsModel:
    """s' = s + diff_std * MLP(normalize(s, a))."""

    def __init__(self, state_dim: int, action_dim: int, hidden: Sequence[int] = (128, 128),
                 rng: np.random.Generator | None = None, lr: float = 1e-3,
                 out_scale: float = 0.01):
        self.state_dim, self.action_dim = state_dim, action_dim
        self.hidden = tuple(hidden)
        self.net = MLP([state_dim + action_dim, *hidden, state_dim], rng, out_scale=out_scale)
        self.normalizer = Normalizer(state_dim, action_dim)
        self.adam = Adam(self.net.params, lr=lr)

    def copy(self) -> "DynamicsModel":
        new = DynamicsModel.__new__(DynamicsModel)
        new.state_dim, new.action_dim, new.hidden = self.state_dim, self.action_dim, self.hidden
        new.net = self.net.copy()
        new.normalizer = Normalizer(self.state_dim, self.action_dim)
        new.normalizer.load_arrays([a.copy() for a in self.normalizer.arrays()])
        new.adam = Adam(new.net.params, lr=self.adam.lr, beta1=self.adam.beta1,
                        beta2=self.adam.beta2, eps=self.adam.eps)
        new.adam.load_state_arrays(self.adam.state_arrays())
        return new

    def predict(self, s: np.ndarray, a: np.ndarray, check: bool = True) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        if s.shape[-1] != self.state_dim or a.shape[-1] != self.action_dim:
            raise ValueError(f"expected state dim {self.state_dim} and action dim "
                             f"{self.action_dim}, got {s.shape[-1]} and {a.shape[-1]}")
        out = s + self.net(self.normalizer.normalize(s, a)) * self.normalizer.diff_std
        if check and not np.all(np.isfinite(out)):
            raise NonFiniteError("dynamics model produced a non-finite prediction")
        return out

    __call__ = predict

    def arrays(self) -> list[np.ndarray]:
        return self.net.params + self.normalizer.arrays() + self.adam.state_arrays()

    def load_arrays(self, arrays: Sequence[np.ndarray]) -> None:
        n = len(self.net.params)
        for p, a in zip(self.net.params, arrays[:n]):
            if p.shape != a.shape:
                raise FormatError(f"checkpoint array shape {a.shape} != model shape {p.shape}")
            p[...] = a
        self.normalizer.load_arrays(arrays[n:n + 6])
        self.adam.load_state_arrays(arrays[n + 6:])

    def save(self, f: BinaryIO) -> None:
        write_arrays(f, self.arrays())

    def load(self, f: BinaryIO) -> None:
        self.load_arrays(read_arrays(f))


def _rollout_windows(model: DynamicsModel, states: np.ndarray, actions: np.ndarray):
    """Roll the model through windows; states (B, k+1, ds), actions (B, k, da)."""
    k = actions.shape[1]
    norm = model.normalizer
    s_hat = states[:, 0]
    caches, preds = [], []
    for i in range(k):
        x = norm.normalize(s_hat, actions[:, i])
        out, cache = model.net.forward_cache(x)
        s_hat = s_hat + out * norm.diff_std
        caches.append(cache)
        preds.append(s_hat)
    return preds, caches


def _check_segment(states: np.ndarray, actions: np.ndarray, k: int):
    if k < 1:
        raise ValueError("k must be >= 1")
    if states.shape[-2] < k + 1 or actions.shape[-2] < k:
        raise ValueError(f"segment of {states.shape[-2]} states is too short for k={k}")


def k_step_loss(model, states: np.ndarray, actions: np.ndarray, k: int) -> float:
    """Mean over the first k predicted states of the unsquared L2 error.

    ``model`` is anything callable as ``model(s, a) -> s'``, so the true
    dynamics can stand in for a learned model. Accepts a single segment
    (k+1, ds)/(k, da) or a batch (B, k+1, ds)/(B, k, da); batches are averaged.
    """
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    _check_segment(states, actions, k)
    if states.ndim == 2:
        states, actions = states[None], actions[None]
    s_hat = states[:, 0]
    total = np.zeros(states.shape[0])
    for i in range(k):
        s_hat = model(s_hat, actions[:, i])
        total += np.linalg.norm(s_hat - states[:, i + 1], axis=-1)
    return float(np.mean(total / k))


def k_step_loss_and_grad(model: DynamicsModel, states: np.ndarray, actions: np.ndarray
                         ) -> tuple[float, list[np.ndarray]]:
    """Batched k-step loss and its gradient w.r.t. the network parameters."""
    k = actions.shape[1]
    b = states.shape[0]
    norm = model.normalizer
    preds, caches = _rollout_windows(model, states, actions)
    errs = [p - states[:, i + 1] for i, p in enumerate(preds)]
    norms = [np.linalg.norm(e, axis=-1) for e in errs]
    loss = float(np.mean(sum(norms)) / k)
    if not np.isfinite(loss):
        raise NonFiniteError("k-step loss is not finite")
    grads = [np.zeros_like(p) for p in model.net.params]
    g_s = np.zeros_like(states[:, 0])
    in_scale = 1.0 / norm.state_std
    for i in range(k - 1, -1, -1):
        g_s = g_s + errs[i] / np.maximum(norms[i], NORM_EPS)[:, None] / (b * k)
        g_out = g_s * norm.diff_std
        pg, g_in = model.net.backward(caches[i], g_out)
        for acc, g in zip(grads, pg):
            acc += g
        # s_hat_{i+1} = s_hat_i + f(norm(s_hat_i)); only the state part of the input chains
        g_s = g_s + g_in[:, :model.state_dim] * in_scale
    return loss, grads


class TransitionDataset:
    """Append-only store of time-contiguous trajectory segments."""

    def __init__(self, state_dim: int, action_dim: int):
        self.state_dim, self.action_dim = state_dim, action_dim
        self._chunks: list[dict[str, np.ndarray]] = []
        self._cat: dict[str, np.ndarray] | None = None
        self._window_cache: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return sum(c["s"].shape[0] for c in self._chunks)

    @property
    def n_segments(self) -> int:
        return len(self._chunks)

    def segment_lengths(self) -> list[int]:
        return [c["s"].shape[0] for c in self._chunks]

    def add_segment(self, s, a, s2, r, t=None, task_id: int = 0, variant_id: int = 0) -> None:
        s = np.array(s, dtype=np.float64)
        n = s.shape[0]
        if n == 0:
            return
        seg = {
            "s": s,
            "a": np.array(a, dtype=np.float64).reshape(n, self.action_dim),
            "s2": np.array(s2, dtype=np.float64).reshape(n, self.state_dim),
            "r": np.array(r, dtype=np.float64).reshape(n),
            "t": np.arange(n, dtype=np.float64) if t is None else np.array(t, dtype=np.float64),
            "task": np.full(n, float(task_id)),
            "variant": np.full(n, float(variant_id)),
        }
        if s.shape[1] != self.state_dim:
            raise ValueError(f"state dim {s.shape[1]} != dataset state dim {self.state_dim}")
        if n > 1 and not np.array_equal(seg["s"][1:], seg["s2"][:-1]):
            raise ValueError("segment is not time-contiguous")
        self._chunks.append(seg)
        self._cat = None
        self._window_cache.clear()

    def add_trajectory(self, traj, task_id: int = 0, variant_id: int = 0) -> None:
        self.add_segment(traj.states, traj.actions, traj.next_states, traj.rewards,
                         None, task_id, variant_id)

    def _flat(self) -> dict[str, np.ndarray]:
        if self._cat is None:
            keys = ("s", "a", "s2", "r", "t", "task", "variant")
            if self._chunks:
                self._cat = {k: np.concatenate([c[k] for c in self._chunks]) for k in keys}
            else:
                self._cat = {"s": np.zeros((0, self.state_dim)), "a": np.zeros((0, self.action_dim)),
                             "s2": np.zeros((0, self.state_dim)),
                             **{k: np.zeros(0) for k in ("r", "t", "task", "variant")}}
        return self._cat

    @property
    def states(self) -> np.ndarray:
        return self._flat()["s"]

    @property
    def actions(self) -> np.ndarray:
        return self._flat()["a"]

    @property
    def next_states(self) -> np.ndarray:
        return self._flat()["s2"]

    @property
    def rewards(self) -> np.ndarray:
        return self._flat()["r"]

    @property
    def task_ids(self) -> np.ndarray:
        return self._flat()["task"].astype(int)

    def window_starts(self, k: int) -> np.ndarray:
        """Flat indices i such that transitions i..i+k-1 lie in one segment."""
        if k not in self._window_cache:
            starts, offset = [], 0
            for n in self.segment_lengths():
                if n >= k:
                    starts.append(np.arange(offset, offset + n - k + 1))
                offset += n
            self._window_cache[k] = np.concatenate(starts) if starts else np.zeros(0, dtype=int)
        return self._window_cache[k]

    def windows(self, idx: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        flat = self._flat()
        steps = idx[:, None] + np.arange(k)[None, :]
        states = np.concatenate([flat["s"][steps], flat["s2"][steps[:, -1]][:, None]], axis=1)
        return states, flat["a"][steps]

    def sample_windows(self, rng: np.random.Generator, batch: int, k: int):
        starts = self.window_starts(k)
        if starts.size == 0:
            raise ValueError(f"dataset holds no segment with at least {k} transitions")
        return self.windows(starts[rng.integers(0, starts.size, size=batch)], k)

    def copy(self) -> "TransitionDataset":
        new = TransitionDataset(self.state_dim, self.action_dim)
        new._chunks = list(self._chunks)  # segments are never mutated
        return new

    def save(self, f: BinaryIO) -> None:
        f.write(DS_MAGIC)
        f.write(struct.pack("<QQQ", self.state_dim, self.action_dim, len(self._chunks)))
        for c in self._chunks:
            n = c["s"].shape[0]
            f.write(struct.pack("<Q", n))
            rec = np.concatenate([c["s"], c["a"], c["s2"], c["r"][:, None], c["t"][:, None],
                                  c["task"][:, None], c["variant"][:, None]], axis=1)
            f.write(np.ascontiguousarray(rec, dtype="<f8").tobytes())

    @classmethod
    def load(cls, f: BinaryIO) -> "TransitionDataset":
        magic = f.read(len(DS_MAGIC))
        if magic != DS_MAGIC:
            raise FormatError(f"bad dataset magic {magic!r}, expected {DS_MAGIC!r}")
        head = f.read(24)
        if len(head) < 24:
            raise FormatError("truncated dataset header")
        ds, da, n_seg = struct.unpack("<QQQ", head)
        out = cls(ds, da)
        width = 2 * ds + da + 4
        for _ in range(n_seg):
            raw = f.read(8)
            if len(raw) < 8:
                raise FormatError("truncated dataset segment header")
            (n,) = struct.unpack("<Q", raw)
            body = f.read(8 * n * width)
            if len(body) < 8 * n * width:
                raise FormatError("truncated dataset segment")
            rec = np.frombuffer(body, dtype="<f8").reshape(n, width).astype(np.float64)
            out.add_segment(rec[:, :ds], rec[:, ds:ds + da], rec[:, ds + da:2 * ds + da],
                            rec[:, 2 * ds + da], rec[:, 2 * ds + da + 1],
                            int(rec[0, -2]), int(rec[0, -1]))
        return out


@dataclass
class ModelTrainResult:
    losses: list[float]

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.losses)) if self.losses else float("nan")


def train_model(model: DynamicsModel, dataset: TransitionDataset, n_steps: int, k: int = 2,
                batch_size: int = 128, rng: np.random.Generator | None = None
                ) -> ModelTrainResult:
    """``n_steps`` Adam steps on uniformly sampled k-windows from ``dataset``."""
    if len(dataset) == 0:
        raise ValueError("cannot train the dynamics model on an empty dataset")
    if n_steps <= 0:
        return ModelTrainResult([])
    rng = rng if rng is not None else np.random.default_rng(0)
    model.normalizer.refresh(dataset)
    losses = []
    for _ in range(n_steps):
        states, actions = dataset.sample_windows(rng, batch_size, k)
        loss, grads = k_step_loss_and_grad(model, states, actions)
        model.adam.step(model.net.params, grads)
        losses.append(loss)
    return ModelTrainResult(losses)
