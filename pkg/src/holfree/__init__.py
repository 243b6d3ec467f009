"""Head-of-line-blocking-free data loading, simulated and measured."""

from .balancer import TimeoutPolicy, process_sample, resume_slow
from .baselines import SyncLoader, autoorder, size_heuristic_classify
from .batcher import build_batches
from .bench import ExperimentConfig, compare, load_config, parse_config, run_experiment
from .core import Batch, ContractError, Sample, Transform, TransformChain, make_chain
from .pipeline import BalancedConfig, BalancedLoader
from .profiler import ProfilerState, percentile, update_timeout
from .queues import BoundedQueue, QueueClosed
from .runtime import RealtimeRuntime, VirtualRuntime, make_runtime
from .scheduler import SchedulerConfig, compute_delta, update_workers
from .trainer_sim import ConsumerConfig, run_consumer
from .workloads import generate, get_spec

__all__ = [
    "Batch", "BoundedQueue", "ConsumerConfig", "ContractError", "ExperimentConfig", "BalancedConfig",
    "BalancedLoader", "ProfilerState", "QueueClosed", "RealtimeRuntime", "Sample", "SchedulerConfig",
    "SyncLoader", "TimeoutPolicy", "Transform", "TransformChain", "VirtualRuntime", "autoorder",
    "build_batches", "compare", "compute_delta", "generate", "get_spec", "load_config", "make_chain",
    "make_runtime", "parse_config", "percentile", "process_sample", "resume_slow", "run_consumer",
    "run_experiment", "size_heuristic_classify", "update_timeout", "update_workers",
]
