"""Test-time adaptation (zero-shot warm-up, then a few SLBO iterations),
policy evaluation with bootstrap intervals, and test-suite aggregation."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import HyperConfig
from .dynmodel import DynamicsModel, TransitionDataset
from .envs import DynamicsVariant, MDPSpec, Task, TaskFamily, make_spec, make_variant, sample_task
from .seeding import substream
from .trainer import (Learner, SampleCounter, collect_real, new_learner, new_model,
                      virtual_training)
from .virtualenv import estimate_return, real_dynamics

CURVE_COLUMNS = ("method", "task_id", "psi", "samples", "mean_return", "ci_lo", "ci_hi")


@dataclass
class EvalResult:
    mean: float
    ci_lo: float
    ci_hi: float
    returns: np.ndarray
    stderr: float = 0.0


def bootstrap_ci(values: Sequence[float], rng: np.random.Generator, n_boot: int = 1000,
                 level: float = 0.95) -> tuple[float, float]:
    """Percentile bootstrap interval of the mean.

    Endpoints are always attained resample means (lower/higher order
    statistics, no interpolation).
    """
    x = np.asarray(values, dtype=np.float64)
    idx = rng.integers(0, x.size, size=(n_boot, x.size))
    means = np.sort(x[idx].mean(axis=1))
    tail = (1.0 - level) / 2 * 100
    return (float(np.percentile(means, tail, method="lower")),
            float(np.percentile(means, 100 - tail, method="higher")))


def evaluate_policy(policy, spec: MDPSpec, variant: DynamicsVariant, task: Task, n_eval: int,
                    rng: np.random.Generator, n_boot: int = 1000,
                    deterministic: bool = False) -> EvalResult:
    """Mean undiscounted return on the real environment with a bootstrap 95% CI.

    Evaluation episodes are not charged to any sample counter.
    """
    if n_eval < 2:
        raise ValueError("n_eval must be >= 2")
    est = estimate_return(policy, real_dynamics(spec, variant), spec, task, n_eval, rng,
                          state_clip=None, deterministic=deterministic)
    lo, hi = bootstrap_ci(est.returns, rng, n_boot)
    return EvalResult(est.mean, lo, hi, est.returns, est.stderr)


def evaluate_task(policy, spec, variant, task, hyper: HyperConfig, seed: int, task_id: int
                  ) -> EvalResult:
    # every method and curve point of a task sees the same evaluation episodes
    return evaluate_policy(policy, spec, variant, task, hyper.n_eval,
                           substream(seed, "eval", task_id), hyper.n_boot)


@dataclass
class CurvePoint:
    samples: int
    mean: float
    ci_lo: float
    ci_hi: float


@dataclass
class AdaptationCurve:
    task_id: int
    psi: list[float]
    points: list[CurvePoint] = field(default_factory=list)
    method: str = "ours"

    @property
    def samples(self) -> list[int]:
        return [p.samples for p in self.points]

    @property
    def means(self) -> np.ndarray:
        return np.array([p.mean for p in self.points])

    def add(self, samples: int, ev: EvalResult) -> None:
        if self.points and samples <= self.points[-1].samples:
            raise ValueError("curve sample coordinates must be strictly increasing")
        self.points.append(CurvePoint(samples, ev.mean, ev.ci_lo, ev.ci_hi))


@dataclass
class AdaptResult:
    learner: Learner
    curve: AdaptationCurve
    counter: SampleCounter


def adapt_ours(model0: DynamicsModel, data0: TransitionDataset, task: Task, hyper: HyperConfig,
               variant: DynamicsVariant, seed: int, task_id: int = 0,
               n_warmup: int | None = None, n_slbo: int | None = None,
               spec: MDPSpec | None = None) -> AdaptResult:
    """Warm up a fresh policy in the transferred model, then continue with SLBO.

    Works on private copies of the model and dataset; test-time data stays
    local to this task. Curve point 0 is the zero-shot policy.
    """
    if len(data0) == 0:
        raise ValueError("adaptation needs a non-empty transferred dataset")
    n_warmup = hyper.n_warmup if n_warmup is None else n_warmup
    n_slbo = hyper.adapt_n_slbo if n_slbo is None else n_slbo
    spec = spec or make_spec(task.family.body, hyper.horizon, hyper.trpo.gamma)
    model, data = model0.copy(), data0.copy()
    counter = SampleCounter()
    learner = new_learner(spec, hyper, substream(seed, "adapt-init", task_id))
    rng = substream(seed, "adapt-virtual", task_id)
    rng_real = substream(seed, "adapt-real", task_id)
    curve = AdaptationCurve(task_id, [float(x) for x in task.psi])
    if n_warmup > 0:
        virtual_training(learner, model, data, spec, task, hyper, n_warmup, rng)
    curve.add(counter.real, evaluate_task(learner.policy, spec, variant, task, hyper, seed, task_id))
    for _ in range(n_slbo):
        collect_real(learner, spec, variant, task, hyper.n_collect, rng_real, counter, data,
                     task_id=-1)
        virtual_training(learner, model, data, spec, task, hyper, hyper.n_inner, rng)
        curve.add(counter.real, evaluate_task(learner.policy, spec, variant, task, hyper, seed,
                                              task_id))
    return AdaptResult(learner, curve, counter)


def scratch_slbo(task: Task, hyper: HyperConfig, variant: DynamicsVariant, seed: int,
                 task_id: int = 0, n_slbo: int | None = None) -> AdaptResult:
    """Single-task SLBO from a fresh model and empty dataset (no transfer)."""
    n_slbo = hyper.adapt_n_slbo if n_slbo is None else n_slbo
    spec = make_spec(task.family.body, hyper.horizon, hyper.trpo.gamma)
    model = new_model(spec, hyper, seed, "scratch", task_id)
    data = TransitionDataset(spec.state_dim, spec.action_dim)
    counter = SampleCounter()
    learner = new_learner(spec, hyper, substream(seed, "scratch-init", task_id))
    rng = substream(seed, "scratch-virtual", task_id)
    rng_real = substream(seed, "scratch-real", task_id)
    curve = AdaptationCurve(task_id, [float(x) for x in task.psi], method="scratch")
    curve.add(0, evaluate_task(learner.policy, spec, variant, task, hyper, seed, task_id))
    for _ in range(n_slbo):
        collect_real(learner, spec, variant, task, hyper.n_collect, rng_real, counter, data,
                     task_id=-1)
        virtual_training(learner, model, data, spec, task, hyper, hyper.n_inner, rng)
        curve.add(counter.real, evaluate_task(learner.policy, spec, variant, task, hyper, seed,
                                              task_id))
    return AdaptResult(learner, curve, counter)


def random_init_return(task: Task, hyper: HyperConfig, variant: DynamicsVariant, seed: int,
                       task_id: int = 0) -> EvalResult:
    spec = make_spec(task.family.body, hyper.horizon, hyper.trpo.gamma)
    learner = new_learner(spec, hyper, substream(seed, "random-init", task_id))
    return evaluate_task(learner.policy, spec, variant, task, hyper, seed, task_id)


@dataclass
class SuiteResult:
    curves: list[AdaptationCurve]
    samples: list[int]
    mean: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    stderr: np.ndarray


def aggregate_curves(curves: Sequence[AdaptationCurve], rng: np.random.Generator,
                     n_boot: int = 1000) -> SuiteResult:
    """Pointwise across-task mean with a bootstrap-over-tasks 95% CI.

    Per-point values are sorted before resampling, so the result does not
    depend on task order.
    """
    if not curves:
        raise ValueError("no curves to aggregate")
    samples = curves[0].samples
    if any(c.samples != samples for c in curves):
        raise ValueError("curves do not share sample coordinates")
    table = np.array([c.means for c in curves])  # (tasks, points)
    mean = table.mean(axis=0)
    if len(curves) == 1:
        only = curves[0]
        return SuiteResult(list(curves), samples, mean,
                           np.array([p.ci_lo for p in only.points]),
                           np.array([p.ci_hi for p in only.points]), np.zeros_like(mean))
    lo, hi = [], []
    seed = int(rng.integers(0, 2**63 - 1))
    for j in range(table.shape[1]):
        a, b = bootstrap_ci(np.sort(table[:, j]), np.random.default_rng(seed), n_boot)
        lo.append(a)
        hi.append(b)
    stderr = table.std(axis=0, ddof=1) / np.sqrt(table.shape[0])
    return SuiteResult(list(curves), samples, mean, np.array(lo), np.array(hi), stderr)


def held_out_tasks(family: TaskFamily, n_test: int, seed: int) -> list[Task]:
    """Held-out tasks drawn from a stream disjoint from the training tasks."""
    return [sample_task(family, substream(seed, "test-task", i)) for i in range(n_test)]


def run_test_suite(model0: DynamicsModel, data0: TransitionDataset, family: TaskFamily,
                   hyper: HyperConfig, variant: str = "nominal", seed: int = 0,
                   n_test: int | None = None, n_slbo: int | None = None,
                   n_warmup: int | None = None) -> SuiteResult:
    n_test = hyper.n_test if n_test is None else n_test
    var = make_variant(family.body, variant)
    curves = [adapt_ours(model0, data0, task, hyper, var, seed, i, n_warmup, n_slbo).curve
              for i, task in enumerate(held_out_tasks(family, n_test, seed))]
    return aggregate_curves(curves, substream(seed, "suite-boot"), hyper.n_boot)


run_test_suite.__test__ = False  # keep pytest from collecting it


def write_curves(path: str | Path, curves: Sequence[AdaptationCurve], append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(CURVE_COLUMNS)
        for c in curves:
            psi = ";".join(repr(float(x)) for x in c.psi)
            for p in c.points:
                w.writerow((c.method, c.task_id, psi, p.samples, repr(p.mean), repr(p.ci_lo),
                            repr(p.ci_hi)))


def read_curves(path: str | Path) -> list[AdaptationCurve]:
    curves: dict[tuple[str, int], AdaptationCurve] = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            key = (row["method"], int(row["task_id"]))
            if key not in curves:
                curves[key] = AdaptationCurve(key[1], [float(x) for x in row["psi"].split(";")],
                                              method=key[0])
            curves[key].points.append(CurvePoint(int(row["samples"]), float(row["mean_return"]),
                                                 float(row["ci_lo"]), float(row["ci_hi"])))
    return list(curves.values())
