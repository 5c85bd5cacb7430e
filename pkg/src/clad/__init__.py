"""Continual learning for image anomaly detection with compressed replay."""

from .data import TaskData, TaskStream, generate_synthetic_stream, load_mvtec_stream
from .experiment import ExperimentConfig, load_config, run_experiment
from .memory import ReplayBudget, default_budget, make_memory
from .metrics import ScoreMatrix, average_forgetting, average_score, fid, pixel_f1
from .models import ArchConfig, build_model
from .strategies import RunResult, StrategyConfig, run_stream

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "ExperimentConfig",
    "ReplayBudget",
    "RunResult",
    "ScoreMatrix",
    "StrategyConfig",
    "TaskData",
    "TaskStream",
    "average_forgetting",
    "average_score",
    "build_model",
    "default_budget",
    "fid",
    "generate_synthetic_stream",
    "load_config",
    "load_mvtec_stream",
    "make_memory",
    "pixel_f1",
    "run_experiment",
    "run_stream",
]
