"""Deterministic simulator for co-scheduling online and offline LLM inference."""

__version__ = "0.1.0"

from .costmodel import CostModelParams, calibrate
from .kvcache import EvictionPolicy, KVCache
from .predictor import MemoryPredictor
from .scheduler import Scheduler, SchedulerConfig, SloConfig
from .simengine import RUNGS, EngineConfig, Metrics, plan_capacity, run
from .workload import SyntheticWorkloadSpec, generate_synthetic, load_trace, preset

__all__ = [
    "CostModelParams",
    "EngineConfig",
    "EvictionPolicy",
    "KVCache",
    "MemoryPredictor",
    "Metrics",
    "RUNGS",
    "Scheduler",
    "SchedulerConfig",
    "SloConfig",
    "SyntheticWorkloadSpec",
    "__version__",
    "calibrate",
    "generate_synthetic",
    "load_trace",
    "plan_capacity",
    "preset",
    "run",
]
