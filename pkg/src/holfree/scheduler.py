"""Feedback control of the preprocessing worker count.

Each tick the controller combines batch-queue slack and worker-pool
utilization into an integer step::

    delta = clip(round(alpha * (1 - q_avg / q_max) + beta * (c_usage - theta_c)), -clip, +clip)
    workers = min(max_workers, max(1, workers + delta))
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .core import Clock, ContractError, Millis, Process, Sleep

log = logging.getLogger(__name__)


@dataclass
class SchedulerConfig:
    alpha: float = 2.0
    beta: float = 2.0
    theta_c: float = 0.7
    q_max: int = 100
    delta_clip: int = 2
    initial_workers: int = 12
    max_workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    tick: Millis = 500
    ema_alpha: float = 0.3

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ContractError("alpha and beta must be >= 0")
        if not 0 < self.theta_c < 1:
            raise ContractError(f"theta_c must be in (0, 1), got {self.theta_c}")
        if self.q_max < 1:
            raise ContractError("q_max must be positive")
        if self.delta_clip < 1:
            raise ContractError("delta_clip must be >= 1")
        if not 1 <= self.initial_workers <= self.max_workers:
            raise ContractError(
                f"need 1 <= initial_workers ({self.initial_workers}) <= max_workers ({self.max_workers})"
            )
        if self.tick <= 0:
            raise ContractError("tick must be positive")
        if not 0 < self.ema_alpha <= 1:
            raise ContractError("ema_alpha must be in (0, 1]")


@dataclass(frozen=True)
class SchedulerObservation:
    q_size_avg: float
    c_usage: float


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def compute_delta(obs: SchedulerObservation, config: SchedulerConfig) -> int:
    if not 0 <= obs.q_size_avg <= config.q_max:
        raise ContractError(f"q_size_avg {obs.q_size_avg} outside [0, {config.q_max}]")
    if not 0 <= obs.c_usage <= 1:
        raise ContractError(f"c_usage {obs.c_usage} outside [0, 1]")
    raw = config.alpha * (1 - obs.q_size_avg / config.q_max) + config.beta * (obs.c_usage - config.theta_c)
    return max(-config.delta_clip, min(config.delta_clip, round_half_away(raw)))


def update_workers(current: int, delta: int, config: SchedulerConfig) -> int:
    if not 1 <= current <= config.max_workers:
        raise ContractError(f"current worker count {current} outside [1, {config.max_workers}]")
    return min(config.max_workers, max(1, current + delta))


@dataclass
class TraceRow:
    time_ms: Millis
    workers: int
    q_avg: float
    c_usage: float
    delta: int


def scheduler_loop(pool, batch_queues: Sequence, config: SchedulerConfig, clock: Clock,
                   stop: Callable[[], bool], trace: Optional[list] = None) -> Process:
    """Resize ``pool`` every tick from the batch-queue EMA and pool utilization.

    ``pool`` must provide ``size``, ``utilization()`` (busy fraction since the
    previous call) and ``resize(n)``.
    """
    q_avg: Optional[float] = None
    while True:
        yield Sleep(config.tick)
        if stop():
            return
        q_now = sum(len(q) for q in batch_queues) / len(batch_queues)
        q_avg = q_now if q_avg is None else config.ema_alpha * q_now + (1 - config.ema_alpha) * q_avg
        q_avg = min(float(config.q_max), q_avg)
        c_usage = pool.utilization()
        delta = compute_delta(SchedulerObservation(q_avg, c_usage), config)
        current = pool.size
        target = update_workers(current, delta, config)
        if target != current:
            pool.resize(target)
        assert 1 <= pool.size <= config.max_workers
        row = TraceRow(clock.now(), pool.size, round(q_avg, 6), round(c_usage, 6), delta)
        if trace is not None:
            trace.append(row)
        log.debug("tick %s", row)


def write_trace_csv(path, rows: Sequence[TraceRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_ms", "workers", "q_avg", "c_usage", "delta"])
        for r in rows:
            w.writerow([r.time_ms, r.workers, r.q_avg, r.c_usage, r.delta])
