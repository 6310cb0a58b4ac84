"""Sequential multi-task model-based reinforcement learning.

A dynamics model and its replay data are carried across a stream of tasks
that share physics but differ in reward; each new task's policy is warmed up
inside the learned model before (or instead of) touching the real system.
"""
from .config import (DESK, PAPER, ActiveConfig, ConfigError, ExperimentConfig, HyperConfig,
                     MamlConfig, load_config, parse_config)
from .envs import TaskFamily, make_spec, make_variant, sample_task
from .trainer import SequentialTrainer, train_sequential

__version__ = "0.1.0"

__all__ = ["DESK", "PAPER", "ActiveConfig", "ConfigError", "ExperimentConfig", "HyperConfig",
           "MamlConfig", "SequentialTrainer", "TaskFamily", "load_config", "make_spec",
           "make_variant", "parse_config", "sample_task", "train_sequential"]
