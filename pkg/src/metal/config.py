"""Hyperparameters, presets and the YAML experiment config.

The experiment file is validated with pydantic before any work starts;
unknown keys are rejected and every diagnostic carries the YAML line.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .envs import TaskFamily
from .trpo import TrustRegionConfig


@dataclass(frozen=True)
class HyperConfig:
    n_tasks: int = 30
    n_warmup: int = 40
    n_slbo: int = 1
    n_collect: int = 1000
    n_inner: int = 4
    n_model: int = 100
    n_policy: int = 20
    n_trpo: int = 1000
    horizon: int = 50
    k: int = 2
    model_hidden: tuple[int, ...] = (128, 128)
    policy_hidden: tuple[int, ...] = (32, 32)
    model_lr: float = 1e-3
    model_batch: int = 128
    init_log_std: float = -0.5
    trpo: TrustRegionConfig = field(default_factory=TrustRegionConfig)
    # adaptation / evaluation
    adapt_n_slbo: int = 3
    n_eval: int = 10
    n_test: int = 10
    n_boot: int = 1000

    def __post_init__(self):
        for name in ("n_tasks", "n_warmup", "n_collect", "n_inner", "n_model", "n_policy",
                     "n_trpo", "horizon", "k", "model_batch", "n_test", "n_boot"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_slbo < 0 or self.adapt_n_slbo < 0:
            raise ValueError("n_slbo must be >= 0")
        if self.n_eval < 2:
            raise ValueError("n_eval must be >= 2")
        if self.n_trpo < self.horizon:
            raise ValueError("n_trpo must be >= horizon")

    def with_(self, **kw) -> "HyperConfig":
        return replace(self, **kw)


DESK = HyperConfig()
PAPER = HyperConfig(n_tasks=100, n_warmup=40, n_slbo=1, n_collect=4000, n_inner=4,
                    n_model=100, n_policy=40, n_trpo=4000, horizon=200,
                    model_hidden=(500, 500), policy_hidden=(32, 32), adapt_n_slbo=3,
                    n_eval=10, n_test=40)
PRESETS = {"desk": DESK, "paper": PAPER}


@dataclass(frozen=True)
class MamlConfig:
    alpha: float = 0.1
    alpha_later: float = 0.05
    beta: float = 0.01
    meta_iters: int = 200
    meta_batch: int = 10
    rollouts: int = 20
    n_grad_steps: int = 3

    def __post_init__(self):
        if self.alpha < 0 or self.alpha_later < 0 or self.beta <= 0:
            raise ValueError("MAML step sizes must be positive")


@dataclass(frozen=True)
class ActiveConfig:
    rating: str = "estimated"  # "true" | "estimated"
    quantile: float = 0.5
    warm_start: int = 5
    window: str = "latest"  # "latest" | "first"
    n_rollouts: int = 10

    def __post_init__(self):
        if self.rating not in ("true", "estimated"):
            raise ValueError("rating must be 'true' or 'estimated'")
        if not 0.0 < self.quantile < 1.0:
            raise ValueError("quantile must lie in (0, 1)")
        if self.warm_start < 1:
            raise ValueError("warm_start must be >= 1")
        if self.window not in ("latest", "first"):
            raise ValueError("window must be 'latest' or 'first'")


# ---------------------------------------------------------------- file schema

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class FamilySection(_Strict):
    kind: Literal["goal-velocity-1d", "goal-velocity-2d", "forward-backward"] = "goal-velocity-1d"
    body: Literal["point-mass", "pendulum"] = "point-mass"
    low: Optional[list[float]] = None
    high: Optional[list[float]] = None

    def build(self) -> TaskFamily:
        default = {"goal-velocity-1d": ([0.0], [2.0]), "goal-velocity-2d": ([-1.0, -1.0], [1.0, 1.0]),
                   "forward-backward": ([-1.0], [1.0])}[self.kind]
        low = self.low if self.low is not None else default[0]
        high = self.high if self.high is not None else default[1]
        return TaskFamily(self.kind, self.body, tuple(low), tuple(high))


class TrpoSection(_Strict):
    max_kl: Optional[float] = Field(None, gt=0)
    cg_iters: Optional[int] = Field(None, ge=1)
    damping: Optional[float] = Field(None, ge=0)
    backtrack_coef: Optional[float] = Field(None, gt=0, lt=1)
    backtrack_steps: Optional[int] = Field(None, ge=1)
    gae_lambda: Optional[float] = Field(None, ge=0, le=1)
    gamma: Optional[float] = Field(None, ge=0, lt=1)
    baseline_epochs: Optional[int] = Field(None, ge=0)
    fvp_stride: Optional[int] = Field(None, ge=1)


class HyperSection(_Strict):
    n_tasks: Optional[int] = Field(None, ge=1)
    n_warmup: Optional[int] = Field(None, ge=1)
    n_slbo: Optional[int] = Field(None, ge=0)
    n_collect: Optional[int] = Field(None, ge=1)
    n_inner: Optional[int] = Field(None, ge=1)
    n_model: Optional[int] = Field(None, ge=1)
    n_policy: Optional[int] = Field(None, ge=1)
    n_trpo: Optional[int] = Field(None, ge=1)
    horizon: Optional[int] = Field(None, ge=1)
    k: Optional[int] = Field(None, ge=1)
    model_hidden: Optional[list[int]] = None
    policy_hidden: Optional[list[int]] = None
    model_lr: Optional[float] = Field(None, gt=0)
    model_batch: Optional[int] = Field(None, ge=1)
    init_log_std: Optional[float] = None
    adapt_n_slbo: Optional[int] = Field(None, ge=0)
    n_eval: Optional[int] = Field(None, ge=2)
    n_test: Optional[int] = Field(None, ge=1)
    n_boot: Optional[int] = Field(None, ge=1)
    trpo: TrpoSection = TrpoSection()


class MamlSection(_Strict):
    alpha: Optional[float] = Field(None, ge=0)
    alpha_later: Optional[float] = Field(None, ge=0)
    beta: Optional[float] = Field(None, gt=0)
    meta_iters: Optional[int] = Field(None, ge=0)
    meta_batch: Optional[int] = Field(None, ge=1)
    rollouts: Optional[int] = Field(None, ge=2)
    n_grad_steps: Optional[int] = Field(None, ge=0)


class ActiveSection(_Strict):
    rating: Optional[Literal["true", "estimated"]] = None
    quantile: Optional[float] = Field(None, gt=0, lt=1)
    warm_start: Optional[int] = Field(None, ge=1)
    window: Optional[Literal["latest", "first"]] = None
    n_rollouts: Optional[int] = Field(None, ge=2)
    compare_ratings: list[Literal["true", "estimated"]] = ["true", "estimated"]
    # trained-task counts at which active and plain runs are compared
    eval_at: list[int] = [5, 20, 30]


class AdaptSection(_Strict):
    run_dir: Optional[str] = None
    task: Optional[int] = Field(None, ge=0)
    family: Optional[FamilySection] = None
    variant: Optional[Literal["nominal", "low-friction", "crippled"]] = None


class BaselineSection(_Strict):
    method: Literal["maml", "oracle", "scratch"] = "maml"
    oracle_budget: Optional[int] = Field(None, ge=0)


class ExperimentConfig(_Strict):
    mode: Optional[Literal["train", "adapt", "baseline", "active"]] = None
    preset: Literal["desk", "paper"] = "desk"
    seed: int = 0
    family: FamilySection = FamilySection()
    variant: Literal["nominal", "low-friction", "crippled"] = "nominal"
    hyper: HyperSection = HyperSection()
    maml: MamlSection = MamlSection()
    active: ActiveSection = ActiveSection()
    adapt: AdaptSection = AdaptSection()
    baseline: BaselineSection = BaselineSection()

    @model_validator(mode="after")
    def _family_builds(self):
        self.family.build()
        if self.adapt.family is not None:
            self.adapt.family.build()
        return self

    def resolved_hyper(self) -> HyperConfig:
        base = PRESETS[self.preset]
        over = self.hyper.model_dump(exclude_none=True, exclude={"trpo"})
        for key in ("model_hidden", "policy_hidden"):
            if key in over:
                over[key] = tuple(over[key])
        trpo = replace(base.trpo, **self.hyper.trpo.model_dump(exclude_none=True))
        return replace(base, trpo=trpo, **over)

    def resolved_maml(self) -> MamlConfig:
        return MamlConfig(**self.maml.model_dump(exclude_none=True))

    def resolved_active(self) -> ActiveConfig:
        return ActiveConfig(**self.active.model_dump(exclude_none=True, exclude={"compare_ratings", "eval_at"}))

    def resolved(self) -> dict[str, Any]:
        """Fully resolved settings, suitable for freezing beside the outputs."""
        hyper = asdict(self.resolved_hyper())
        fam = self.family.build()
        return {
            "mode": self.mode, "preset": self.preset, "seed": self.seed,
            "family": {"kind": fam.kind, "body": fam.body, "low": list(fam.low),
                       "high": list(fam.high)},
            "variant": self.variant,
            "hyper": _plain(hyper),
            "maml": asdict(self.resolved_maml()),
            "active": {**asdict(self.resolved_active()),
                       "compare_ratings": list(self.active.compare_ratings),
                       "eval_at": list(self.active.eval_at)},
            "adapt": self.adapt.model_dump(),
            "baseline": self.baseline.model_dump(),
        }


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


class ConfigError(ValueError):
    """Invalid experiment file; the message is already line-precise."""


def _line_of(node: yaml.Node | None, loc: tuple) -> int | None:
    """1-based line of the deepest YAML node reachable along ``loc``."""
    line = node.start_mark.line + 1 if node is not None else None
    for part in loc:
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for k, v in node.value:
                if k.value == str(part):
                    # report the key line for unknown keys, value line otherwise
                    line, nxt = k.start_mark.line + 1, v
                    break
            if nxt is None:
                return line
            node = nxt
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int) and part < len(node.value):
            node = node.value[part]
            line = node.start_mark.line + 1
        else:
            return line
    return line


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark else source
        raise ConfigError(f"{where}: YAML syntax error: {e}") from e
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}:1: top level must be a mapping")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        lines = []
        for err in e.errors():
            loc = tuple(p for p in err["loc"] if not (isinstance(p, str) and p.startswith("function-")))
            line = _line_of(node, loc)
            dotted = ".".join(str(p) for p in loc) or "<root>"
            msg = "unknown key" if err["type"] == "extra_forbidden" else err["msg"]
            lines.append(f"{source}:{line if line is not None else '?'}: {dotted}: {msg}")
        raise ConfigError("\n".join(lines)) from e
    except ValueError as e:
        raise ConfigError(f"{source}: {e}") from e


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def config_from_dict(data: dict) -> ExperimentConfig:
    return parse_config(yaml.safe_dump(data))

