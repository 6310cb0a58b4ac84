"""Sequential multi-task training: per-task warm-up inside the learned model,
then SLBO-style alternation of data collection, model fitting and virtual
policy optimization. Only the model and the dataset survive a task."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path

import numpy as np

from . import active as act
from .config import ActiveConfig, HyperConfig
from .dynmodel import DynamicsModel, TransitionDataset, train_model
from .envs import MDPSpec, Task, TaskFamily, make_spec, make_variant, sample_task
from .metrics import MetricsWriter
from .ndmath import FormatError
from .seeding import substream
from .trpo import GaussianPolicy, ValueBaseline, fit_baseline, gae_advantages, trpo_step
from .virtualenv import STATE_CLIP, collect_samples, real_dynamics

log = logging.getLogger(__name__)

STATE_VERSION = 1
VARIANT_IDS = {"nominal": 0, "low-friction": 1, "crippled": 2}


@dataclass
class SampleCounter:
    real: int = 0


@dataclass
class Learner:
    """Per-task policy and its value baseline."""
    policy: GaussianPolicy
    baseline: ValueBaseline


def new_learner(spec: MDPSpec, hyper: HyperConfig, rng: np.random.Generator,
                obs_dim: int | None = None) -> Learner:
    obs_dim = spec.state_dim if obs_dim is None else obs_dim
    policy = GaussianPolicy(obs_dim, spec.action_dim, hyper.policy_hidden, rng,
                            init_log_std=hyper.init_log_std)
    return Learner(policy, ValueBaseline(obs_dim, hyper.policy_hidden, rng))


def new_model(spec: MDPSpec, hyper: HyperConfig, seed: int, stream: str = "model-init",
              *index: int) -> DynamicsModel:
    return DynamicsModel(spec.state_dim, spec.action_dim, hyper.model_hidden,
                         substream(seed, stream, *index), lr=hyper.model_lr)


def policy_update(learner: Learner, trajs, hyper: HyperConfig, rng: np.random.Generator):
    """One TRPO step plus a baseline refit on a batch of trajectories."""
    cfg = hyper.trpo
    adv, targets = gae_advantages(trajs, learner.baseline, cfg.gamma, cfg.gae_lambda)
    obs = np.concatenate([t.states for t in trajs])
    acts = np.concatenate([t.actions for t in trajs])
    info = trpo_step(learner.policy, obs, acts, adv, cfg)
    fit_baseline(learner.baseline, obs, targets, cfg.baseline_epochs, rng=rng)
    return info


@dataclass
class VirtualTrainingResult:
    model_losses: list[float] = field(default_factory=list)
    virtual_returns: list[float] = field(default_factory=list)
    kls: list[float] = field(default_factory=list)
    accepted: int = 0
    snapshots: list[DynamicsModel] = field(default_factory=list)


def virtual_training(learner: Learner, model: DynamicsModel, dataset: TransitionDataset,
                     spec: MDPSpec, task: Task, hyper: HyperConfig, n_inner: int,
                     rng: np.random.Generator, keep_snapshots: int = 0,
                     on_iteration=None) -> VirtualTrainingResult:
    """``n_inner`` rounds of [fit model, then n_policy virtual TRPO steps].

    Touches no real environment. The last ``keep_snapshots`` model states
    (one per inner iteration) are kept for rating tasks.
    """
    if len(dataset) == 0:
        raise ValueError("virtual training needs a non-empty dataset")
    res = VirtualTrainingResult()
    dyn = partial(model.predict, check=False)
    for it in range(n_inner):
        fit = train_model(model, dataset, hyper.n_model, hyper.k, hyper.model_batch, rng)
        res.model_losses.append(fit.mean_loss)
        rets = []
        for _ in range(hyper.n_policy):
            trajs = collect_samples(learner.policy, dyn, spec, task, hyper.n_trpo, rng,
                                    state_clip=STATE_CLIP)
            rets.append(float(np.mean([t.ret for t in trajs])))
            info = policy_update(learner, trajs, hyper, rng)
            res.accepted += int(info.accepted)
            res.kls.append(info.kl)
        res.virtual_returns.append(float(np.mean(rets)))
        if keep_snapshots and it >= n_inner - keep_snapshots:
            res.snapshots.append(model.copy())
        if on_iteration is not None:
            on_iteration(it, fit.mean_loss, res.virtual_returns[-1])
    return res


def collect_real(learner: Learner, spec: MDPSpec, variant, task: Task, n: int,
                 rng: np.random.Generator, counter: SampleCounter, dataset: TransitionDataset,
                 task_id: int = 0):
    """Collect ``n`` real transitions with the stochastic policy into ``dataset``."""
    trajs = collect_samples(learner.policy, real_dynamics(spec, variant), spec, task, n, rng,
                            state_clip=None)
    for t in trajs:
        counter.real += len(t)
        dataset.add_trajectory(t, task_id, VARIANT_IDS.get(variant.name, -1))
    return trajs


@dataclass
class TaskRecord:
    index: int
    draw: int
    psi: list[float]
    skipped: bool = False
    aborted: bool = False
    rating: float | None = None
    real_samples: int = 0
    warmup_return: float | None = None
    final_return: float | None = None
    model_loss: float | None = None


@dataclass
class TrainingArtifacts:
    model: DynamicsModel
    dataset: TransitionDataset
    records: list[TaskRecord]
    real_samples: int
    metrics: MetricsWriter


def _atomic_write(path: Path, writer) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        writer(f)
    os.replace(tmp, path)


class SequentialTrainer:
    """Runs the task loop; resumable at task boundaries.

    All randomness for task ``j`` (the j-th drawn task, skipped or not) comes
    from substreams keyed by ``(seed, j)``, so a resumed run replays exactly.
    """

    def __init__(self, hyper: HyperConfig, family: TaskFamily, variant: str = "nominal",
                 seed: int = 0, out_dir: str | Path | None = None,
                 active: ActiveConfig | None = None, metrics: MetricsWriter | None = None):
        if active is not None and active.rating == "estimated" and \
                min(hyper.n_inner, hyper.n_warmup) < 2:
            raise ValueError("estimated ratings need n_inner >= 2 and n_warmup >= 2 "
                             "(two model snapshots)")
        self.hyper, self.family, self.seed = hyper, family, seed
        self.spec = make_spec(family.body, hyper.horizon, hyper.trpo.gamma)
        self.variant = make_variant(family.body, variant)
        self.model = new_model(self.spec, hyper, seed)
        self.dataset = TransitionDataset(self.spec.state_dim, self.spec.action_dim)
        self.counter = SampleCounter()
        self.trained = 0
        self.drawn = 0
        self.records: list[TaskRecord] = []
        self.boundaries: list[dict] = []
        self.active = active
        self.skip_rule = (act.SkipRule(active.quantile, active.warm_start, active.window)
                          if active else None)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            (self.out_dir / "models").mkdir(parents=True, exist_ok=True)
        if metrics is None:
            metrics = MetricsWriter(self.out_dir / "metrics.csv" if self.out_dir else None)
        self.metrics = metrics

    # ------------------------------------------------------------------ loop
    def run(self, n_tasks: int | None = None) -> TrainingArtifacts:
        n_tasks = self.hyper.n_tasks if n_tasks is None else n_tasks
        while self.trained < n_tasks:
            self.step_task()
        return self.artifacts()

    def artifacts(self) -> TrainingArtifacts:
        return TrainingArtifacts(self.model, self.dataset, self.records, self.counter.real,
                                 self.metrics)

    def step_task(self) -> TaskRecord:
        j = self.drawn
        self.drawn += 1
        hyper, spec = self.hyper, self.spec
        task = sample_task(self.family, substream(self.seed, "task", j))
        learner = new_learner(spec, hyper, substream(self.seed, "init", j))
        rng = substream(self.seed, "virtual", j)
        rng_real = substream(self.seed, "real", j)
        rec = TaskRecord(self.trained, j, [float(x) for x in task.psi])

        def logger(phase):
            def on_iter(it, loss, vret):
                self.metrics.log(self.counter.real, j, phase, model_loss=loss,
                                 virtual_return=vret)
            return on_iter

        try:
            if len(self.dataset):
                keep = hyper.n_inner if self.active else 0
                vt = virtual_training(learner, self.model, self.dataset, spec, task, hyper,
                                      hyper.n_warmup, rng, keep, logger("warmup"))
                rec.warmup_return = vt.virtual_returns[-1]
                if self.active and self._rate_and_skip(task, learner, vt, rec, j):
                    return self._finish(rec)
            for _ in range(hyper.n_slbo):
                collect_real(learner, spec, self.variant, task, hyper.n_collect, rng_real,
                             self.counter, self.dataset, j)
                vt = virtual_training(learner, self.model, self.dataset, spec, task, hyper,
                                      hyper.n_inner, rng, 0, logger("slbo"))
                rec.final_return = vt.virtual_returns[-1]
                rec.model_loss = vt.model_losses[-1]
        except FloatingPointError as e:
            log.warning("task %d aborted: %s", j, e)
            rec.aborted = True
            self.metrics.log(self.counter.real, j, "abort", aborted=1.0)
        self.trained += 1
        return self._finish(rec)

    def _rate_and_skip(self, task, learner, vt, rec, j) -> bool:
        cfg = self.active
        rng = substream(self.seed, "rate", j)
        if cfg.rating == "true":
            rating = act.rate_true(task, learner.policy, self.model, self.spec, self.variant,
                                   cfg.n_rollouts, rng, self.counter)
        else:
            rating = act.rate_estimated(task, learner.policy, vt.snapshots, self.spec,
                                        cfg.n_rollouts, rng)
        skip = act.should_skip(self.skip_rule, rating.mu)
        rec.rating = rating.mu
        rec.skipped = skip
        self.metrics.log(self.counter.real, j, "rating", mu=rating.mu,
                         estimated=float(cfg.rating == "estimated"), skipped=float(skip))
        return skip

    def _finish(self, rec: TaskRecord) -> TaskRecord:
        rec.real_samples = self.counter.real
        self.records.append(rec)
        self.metrics.log(self.counter.real, rec.draw, "task-end",
                         trained=float(self.trained), skipped=float(rec.skipped),
                         dataset_size=float(len(self.dataset)))
        self.boundaries.append({"trained": self.trained, "drawn": self.drawn,
                                "real_samples": self.counter.real,
                                "segments": self.dataset.n_segments})
        if self.out_dir is not None:
            self.save()
        self.metrics.flush()
        return rec

    # ----------------------------------------------------------- persistence
    def save(self) -> None:
        out = self.out_dir
        _atomic_write(out / "models" / f"model_{self.drawn:04d}.bin", self.model.save)
        _atomic_write(out / "model.bin", self.model.save)
        _atomic_write(out / "dataset.bin", self.dataset.save)
        state = {
            "version": STATE_VERSION, "seed": self.seed, "trained": self.trained,
            "drawn": self.drawn, "real_samples": self.counter.real,
            "dataset_size": len(self.dataset), "segments": self.dataset.n_segments,
            "skip_history": self.skip_rule.history if self.skip_rule else [],
            "boundaries": self.boundaries,
            "records": [rec.__dict__ for rec in self.records],
        }
        _atomic_write(out / "state.json", lambda f: f.write(json.dumps(state, indent=1).encode()))

    @classmethod
    def resume(cls, out_dir: str | Path, hyper: HyperConfig, family: TaskFamily,
               variant: str = "nominal", seed: int = 0,
               active: ActiveConfig | None = None) -> "SequentialTrainer":
        out_dir = Path(out_dir)
        trainer = cls(hyper, family, variant, seed, out_dir, active)
        state = json.loads((out_dir / "state.json").read_text())
        if state.get("version") != STATE_VERSION:
            raise FormatError(f"run state version {state.get('version')} != {STATE_VERSION}")
        if state["seed"] != seed:
            raise FormatError(f"run was trained with seed {state['seed']}, not {seed}")
        with open(out_dir / "model.bin", "rb") as f:
            trainer.model.load(f)
        with open(out_dir / "dataset.bin", "rb") as f:
            trainer.dataset = TransitionDataset.load(f)
        if len(trainer.dataset) != state["dataset_size"]:
            raise FormatError("dataset size does not match the recorded run state")
        trainer.trained, trainer.drawn = state["trained"], state["drawn"]
        trainer.counter.real = state["real_samples"]
        trainer.metrics._last_samples = trainer.counter.real
        trainer.boundaries = state["boundaries"]
        trainer.records = [TaskRecord(**r) for r in state["records"]]
        if trainer.skip_rule is not None:
            trainer.skip_rule.history = list(state["skip_history"])
        return trainer


def train_sequential(hyper: HyperConfig, family: TaskFamily, variant: str = "nominal",
                     seed: int = 0, out_dir: str | Path | None = None,
                     active: ActiveConfig | None = None) -> TrainingArtifacts:
    return SequentialTrainer(hyper, family, variant, seed, out_dir, active).run()


def load_run(run_dir: str | Path, hyper: HyperConfig, body: str, boundary: int | None = None
             ) -> tuple[DynamicsModel, TransitionDataset, dict]:
    """Model and dataset as they stood after ``boundary`` drawn tasks (default: the end)."""
    run_dir = Path(run_dir)
    state = json.loads((run_dir / "state.json").read_text())
    if state.get("version") != STATE_VERSION:
        raise FormatError(f"run state version {state.get('version')} != {STATE_VERSION}")
    spec = make_spec(body, hyper.horizon, hyper.trpo.gamma)
    model = new_model(spec, hyper, state["seed"])
    with open(run_dir / "dataset.bin", "rb") as f:
        data = TransitionDataset.load(f)
    if boundary is None:
        with open(run_dir / "model.bin", "rb") as f:
            model.load(f)
        return model, data, state
    match = [b for b in state["boundaries"] if b["drawn"] == boundary]
    if not match:
        raise FormatError(f"no checkpoint at task boundary {boundary}")
    with open(run_dir / "models" / f"model_{boundary:04d}.bin", "rb") as f:
        model.load(f)
    prefix = TransitionDataset(data.state_dim, data.action_dim)
    prefix._chunks = data._chunks[:match[0]["segments"]]
    return model, prefix, state
