"""Command-line experiment runner.

    metal train|adapt|baseline|active --config FILE --out DIR [--seed N]
                                      [--preset desk|paper] [--resume]

Every run freezes its fully resolved config as ``config.yaml`` in the output
directory. Invalid configs exit with status 2 and a line-precise message; a
failure mid-run leaves whatever was written plus a ``FAILED`` marker and exits
with status 1.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from .adapt import (AdaptationCurve, aggregate_curves, adapt_ours, held_out_tasks, scratch_slbo,
                    write_curves)
from .baselines import maml_adapt, maml_metatrain, oracle_curve, oracle_train
from .config import ConfigError, ExperimentConfig, HyperConfig, load_config
from .envs import make_spec, make_variant
from .metrics import MetricsWriter
from .ndmath import write_arrays
from .seeding import substream
from .trainer import SequentialTrainer, load_run

log = logging.getLogger("metal")

FAILED_MARKER = "FAILED"
DIFF_COLUMNS = ("rating", "trained_tasks", "active_mean", "plain_mean", "difference",
                "active_stderr", "plain_stderr", "active_skipped")


def _freeze(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.resolved(), sort_keys=False))


def _write_suite(path: Path, curves: list[AdaptationCurve], seed: int, n_boot: int) -> None:
    """Across-task mean curve per method."""
    by_method: dict[str, list[AdaptationCurve]] = {}
    for c in curves:
        by_method.setdefault(c.method, []).append(c)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("method", "samples", "mean_return", "ci_lo", "ci_hi", "stderr", "n_tasks"))
        for method, group in by_method.items():
            s = aggregate_curves(group, substream(seed, "suite-boot", len(method)), n_boot)
            for j, n in enumerate(s.samples):
                w.writerow((method, n, repr(float(s.mean[j])), repr(float(s.ci_lo[j])),
                            repr(float(s.ci_hi[j])), repr(float(s.stderr[j])), len(group)))


# ------------------------------------------------------------------- modes

def run_train(cfg: ExperimentConfig, out: Path, resume: bool = False) -> dict:
    hyper = cfg.resolved_hyper()
    family = cfg.family.build()
    if resume and (out / "state.json").exists():
        trainer = SequentialTrainer.resume(out, hyper, family, cfg.variant, cfg.seed)
    else:
        trainer = SequentialTrainer(hyper, family, cfg.variant, cfg.seed, out)
    art = trainer.run()
    return {"trained": trainer.trained, "real_samples": art.real_samples,
            "dataset_size": len(art.dataset)}


def _run_hyper(run_dir: Path, hyper: HyperConfig) -> tuple[HyperConfig, str]:
    """The adaptation settings with the model architecture of the trained run."""
    trained = load_config(run_dir / "config.yaml")
    th = trained.resolved_hyper()
    return hyper.with_(model_hidden=th.model_hidden), trained.family.build().body


def run_adapt(cfg: ExperimentConfig, out: Path) -> dict:
    if cfg.adapt.run_dir is None:
        raise ConfigError("adapt mode needs adapt.run_dir (the output of a train run)")
    run_dir = Path(cfg.adapt.run_dir)
    hyper, body = _run_hyper(run_dir, cfg.resolved_hyper())
    family = (cfg.adapt.family or cfg.family).build()
    if family.body != body:
        raise ConfigError(f"adapt family body {family.body!r} differs from trained body {body!r}")
    variant = make_variant(body, cfg.adapt.variant or cfg.variant)
    model, data, _ = load_run(run_dir, hyper, body, cfg.adapt.task)
    curves = []
    metrics = MetricsWriter(out / "metrics.csv")
    used = 0
    for i, task in enumerate(held_out_tasks(family, hyper.n_test, cfg.seed)):
        res = adapt_ours(model, data, task, hyper, variant, cfg.seed, i)
        curves.append(res.curve)
        used += res.counter.real
        metrics.log(used, i, "adapt", zero_shot=res.curve.points[0].mean,
                    final=res.curve.points[-1].mean, task_samples=res.counter.real)
        metrics.flush()
    write_curves(out / "curves.csv", curves)
    _write_suite(out / "suite.csv", curves, cfg.seed, hyper.n_boot)
    return {"tasks": len(curves), "points": len(curves[0].points)}


def run_baseline(cfg: ExperimentConfig, out: Path) -> dict:
    hyper = cfg.resolved_hyper()
    family = cfg.family.build()
    spec = make_spec(family.body, hyper.horizon, hyper.trpo.gamma)
    variant = make_variant(family.body, cfg.variant)
    tasks = held_out_tasks(family, hyper.n_test, cfg.seed)
    method = cfg.baseline.method
    metrics = MetricsWriter(out / "metrics.csv")
    curves: list[AdaptationCurve] = []
    summary: dict = {"method": method}
    if method == "maml":
        mcfg = cfg.resolved_maml()
        res = maml_metatrain(family, variant, mcfg, hyper, cfg.seed)
        for it, (pre, post) in enumerate(zip(res.pre_returns, res.post_returns)):
            metrics.log(res.counter.real, it, "meta", pre_return=pre, post_return=post)
        metrics.flush()
        with open(out / "policy.bin", "wb") as f:
            write_arrays(f, [*res.policy.net.params, res.policy.log_std])
        # one gradient step per collection batch keeps the sample axis shared
        rollouts = max(2, hyper.n_collect // hyper.horizon)
        for i, task in enumerate(tasks):
            curves.append(maml_adapt(res.policy, task, spec, variant, mcfg, hyper, cfg.seed, i,
                                     hyper.adapt_n_slbo, rollouts).curve)
        summary["meta_samples"] = res.counter.real
    elif method == "oracle":
        budget = cfg.baseline.oracle_budget
        if budget is None:
            budget = hyper.n_tasks * hyper.n_slbo * hyper.n_collect
        res = oracle_train(family, variant, hyper, budget, cfg.seed)
        with open(out / "policy.bin", "wb") as f:
            write_arrays(f, [*res.policy.net.params, res.policy.log_std])
        axis = [k * hyper.n_collect for k in range(hyper.adapt_n_slbo + 1)]
        curves = [oracle_curve(res, t, spec, variant, hyper, cfg.seed, i, axis)
                  for i, t in enumerate(tasks)]
        summary["train_samples"] = res.counter.real
    else:
        curves = [scratch_slbo(t, hyper, variant, cfg.seed, i).curve for i, t in enumerate(tasks)]
    write_curves(out / "curves.csv", curves)
    _write_suite(out / "suite.csv", curves, cfg.seed, hyper.n_boot)
    summary["tasks"] = len(curves)
    return summary


def _zero_shot(run_dir: Path, boundary: int, hyper: HyperConfig, cfg: ExperimentConfig
               ) -> np.ndarray:
    family = cfg.family.build()
    model, data, _ = load_run(run_dir, hyper, family.body, boundary)
    variant = make_variant(family.body, cfg.variant)
    return np.array([adapt_ours(model, data, t, hyper, variant, cfg.seed, i, n_slbo=0)
                     .curve.points[0].mean
                     for i, t in enumerate(held_out_tasks(family, hyper.n_test, cfg.seed))])


def _boundary_for(state: dict, trained: int) -> int | None:
    for b in state["boundaries"]:
        if b["trained"] == trained:
            return b["drawn"]
    return None


def run_active(cfg: ExperimentConfig, out: Path) -> dict:
    """Active and plain sequential runs, compared zero-shot at fixed trained-task counts."""
    hyper = cfg.resolved_hyper()
    family = cfg.family.build()
    acfg = cfg.resolved_active()
    if "estimated" in cfg.active.compare_ratings and min(hyper.n_inner, hyper.n_warmup) < 2:
        raise ConfigError("active: estimated ratings need hyper.n_inner >= 2 and "
                          "hyper.n_warmup >= 2 (two model snapshots)")
    points = sorted({n for n in cfg.active.eval_at if n <= hyper.n_tasks} | {hyper.n_tasks})
    runs = {"plain": None, **{r: replace(acfg, rating=r) for r in cfg.active.compare_ratings}}
    states = {}
    for name, active in runs.items():
        sub = out / name
        trainer = SequentialTrainer(hyper, family, cfg.variant, cfg.seed, sub, active)
        trainer.run()
        states[name] = json.loads((sub / "state.json").read_text())
    plain = {n: _zero_shot(out / "plain", _boundary_for(states["plain"], n), hyper, cfg)
             for n in points}
    rows = []
    for rating in cfg.active.compare_ratings:
        st = states[rating]
        for n in points:
            a = _zero_shot(out / rating, _boundary_for(st, n), hyper, cfg)
            p = plain[n]
            skipped = sum(1 for r in st["records"] if r["skipped"] and r["index"] < n)
            se = lambda x: float(x.std(ddof=1) / np.sqrt(x.size)) if x.size > 1 else 0.0
            rows.append((rating, n, float(a.mean()), float(p.mean()), float(a.mean() - p.mean()),
                         se(a), se(p), skipped))
    with open(out / "difference.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(DIFF_COLUMNS)
        for r in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    word = {1: "better", -1: "worse", 0: "equal"}
    return {"rows": len(rows),
            "direction": {f"{r[0]}@{r[1]}": word[int(np.sign(r[4]))] for r in rows}}


MODES = {"train": run_train, "adapt": run_adapt, "baseline": run_baseline, "active": run_active}


# --------------------------------------------------------------------- entry

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metal", description="Sequential multi-task model-based RL")
    p.add_argument("mode", choices=sorted(MODES))
    p.add_argument("--config", required=True, help="YAML experiment file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--preset", choices=("desk", "paper"), default=None)
    p.add_argument("--resume", action="store_true",
                   help="train mode: continue from the last task boundary in --out")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if cfg.mode is not None and cfg.mode != args.mode:
            raise ConfigError(f"{args.config}: config is for mode {cfg.mode!r}, "
                              f"not {args.mode!r}")
        update = {"mode": args.mode}
        if args.seed is not None:
            update["seed"] = args.seed
        if args.preset is not None:
            update["preset"] = args.preset
        cfg = cfg.model_copy(update=update)
        cfg.resolved_hyper()
    except (ConfigError, ValueError, OSError) as e:
        print(f"metal: invalid config: {e}", file=sys.stderr)
        return 2
    out = Path(args.out)
    if args.resume and args.mode != "train":
        print("metal: --resume only applies to train mode", file=sys.stderr)
        return 2
    try:
        _freeze(cfg, out)
        (out / FAILED_MARKER).unlink(missing_ok=True)
        if args.mode == "train":
            summary = run_train(cfg, out, args.resume)
        else:
            summary = MODES[args.mode](cfg, out)
    except ConfigError as e:
        print(f"metal: invalid config: {e}", file=sys.stderr)
        (out / FAILED_MARKER).write_text(str(e) + "\n")
        return 2
    except Exception as e:  # noqa: BLE001 - every failure leaves a marker
        (out / FAILED_MARKER).write_text(traceback.format_exc())
        print(f"metal: {args.mode} failed: {e}", file=sys.stderr)
        return 1
    print(json.dumps(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
