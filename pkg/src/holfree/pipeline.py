"""Wiring of the timeout-balanced loader: worker pool, batchers, consumers.

Topology: every preprocessing worker owns a fast, a temp and a slow queue and
is paired with one resume worker draining its temp queue. One batcher per
consumer drains all workers' fast/slow queues round-robin into that
consumer's batch queue. ``shared_queues=True`` collapses the per-worker
queues into one fast/temp/slow triple.
"""

from __future__ import annotations

import logging
import math
import random
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .balancer import FAST, TimeoutPolicy, process_sample, resume_slow
from .batcher import build_batches
from .core import Classification, Millis, Process, Put, Sample
from .profiler import ProfilerState, SampleStats, profiler_loop
from .queues import BoundedQueue, QueueClosed
from .scheduler import SchedulerConfig, scheduler_loop
from .trainer_sim import ConsumerConfig, run_consumer

log = logging.getLogger(__name__)


class SampleSource:
    """Thread-safe cursor over a materialized sample stream."""

    def __init__(self, samples: Sequence[Sample]) -> None:
        self._samples = list(samples)
        self._pos = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._samples)

    def next(self) -> Optional[Sample]:
        with self._lock:
            if self._pos >= len(self._samples):
                return None
            s = self._samples[self._pos]
            self._pos += 1
            return s


class _Closer:
    """Closes a queue once every registered holder has released it."""

    def __init__(self, queue: BoundedQueue) -> None:
        self.queue = queue
        self.holders = 0

    def acquire(self) -> None:
        self.holders += 1

    def release(self) -> None:
        self.holders -= 1
        if self.holders == 0:
            self.queue.close()


@dataclass
class BalancedConfig:
    batch_size: int
    n_consumers: int = 1
    queue_capacity: int = 100
    batcher_sleep: Millis = 10
    shared_queues: bool = False
    timeout_ms: Optional[float] = None
    adaptive_timeout: bool = True
    profile_window: int = 1024
    warmup_ms: Millis = 10_000
    profile_interval: Millis = 1000
    classifier: str = "timeout"
    size_cutoff: Optional[int] = None
    workers: int = 12
    scheduler: Optional[SchedulerConfig] = None

    def __post_init__(self) -> None:
        if self.classifier not in ("timeout", "size"):
            raise ValueError(f"classifier must be 'timeout' or 'size', got {self.classifier!r}")
        if self.classifier == "size" and not self.size_cutoff:
            raise ValueError("size classifier needs a positive size_cutoff")
        if self.n_consumers < 1:
            raise ValueError("n_consumers must be >= 1")


@dataclass
class _Worker:
    wid: int
    fast: BoundedQueue
    temp: BoundedQueue
    slow: BoundedQueue
    spawned_at: Millis
    retiring: bool = False
    exited_at: Optional[Millis] = None
    busy_since: Optional[Millis] = None
    samples: int = 0
    foreground_ms: list = field(default_factory=list)


class WorkerPool:
    def __init__(self, runtime, source: SampleSource, policy: TimeoutPolicy, profiler: ProfilerState,
                 cfg: BalancedConfig, rng: random.Random) -> None:
        self.runtime = runtime
        self.clock = runtime.clock
        self.source = source
        self.policy = policy
        self.profiler = profiler
        self.cfg = cfg
        self.rng = rng
        self.fast_queues: list = []
        self.slow_queues: list = []
        self.workers: list[_Worker] = []
        self.sealed = False
        self._lock = threading.RLock()
        self._last_tick = self.clock.now()
        self._busy_acc = 0
        self.fast_count = 0
        self.temp_insertions = 0
        self.slow_completed = 0
        self.max_foreground_over_budget = 0
        if cfg.shared_queues:
            cap = cfg.queue_capacity
            self._shared = tuple(
                _Closer(BoundedQueue(cap, role=r, name=f"shared.{r}")) for r in ("fast", "temp", "slow")
            )
            self.fast_queues.append(self._shared[0].queue)
            self.slow_queues.append(self._shared[2].queue)
        else:
            self._shared = None

    # ------------------------------------------------------------ sizing

    @property
    def size(self) -> int:
        return sum(1 for w in self.workers if w.exited_at is None and not w.retiring)

    def resize(self, n: int) -> None:
        with self._lock:
            if self.sealed:
                return
            cur = self.size
            for _ in range(n - cur):
                self.spawn()
            if n < cur:
                active = [w for w in self.workers if w.exited_at is None and not w.retiring]
                for w in active[n - cur:]:
                    w.retiring = True

    def spawn(self) -> Optional[_Worker]:
        with self._lock:
            if self.sealed:
                return None
            wid = len(self.workers)
            cap = self.cfg.queue_capacity
            if self._shared is not None:
                fast_c, temp_c, slow_c = self._shared
                fast_c.acquire()
                temp_c.acquire()
                slow_c.acquire()
                fast, temp, slow = fast_c.queue, temp_c.queue, slow_c.queue
            else:
                fast = BoundedQueue(cap, role="fast", name=f"w{wid}.fast")
                temp = BoundedQueue(cap, role="temp", name=f"w{wid}.temp")
                slow = BoundedQueue(cap, role="slow", name=f"w{wid}.slow")
                self.fast_queues.append(fast)
                self.slow_queues.append(slow)
            w = _Worker(wid, fast, temp, slow, self.clock.now())
            self.workers.append(w)
        self.runtime.spawn(self._foreground(w), f"w{wid}")
        self.runtime.spawn(self._background(w), f"w{wid}.resume")
        return w

    # ------------------------------------------------------- utilization

    def _mark_idle(self, w: _Worker) -> None:
        if w.busy_since is not None:
            with self._lock:
                self._busy_acc += self.clock.now() - max(w.busy_since, self._last_tick)
            w.busy_since = None

    def utilization(self) -> float:
        """Foreground busy fraction of the pool since the previous call."""
        with self._lock:
            now = self.clock.now()
            last = self._last_tick
            busy = self._busy_acc
            capacity = 0
            for w in self.workers:
                end = now if w.exited_at is None else w.exited_at
                if end <= last:
                    continue
                capacity += end - max(w.spawned_at, last)
                if w.busy_since is not None:
                    busy += now - max(w.busy_since, last)
                    w.busy_since = now
            self._busy_acc = 0
            self._last_tick = now
        if capacity <= 0:
            return 0.0
        return max(0.0, min(1.0, busy / capacity))

    # --------------------------------------------------------- processes

    def _foreground(self, w: _Worker) -> Process:
        clock = self.clock
        try:
            while not w.retiring:
                sample = self.source.next()
                if sample is None:
                    with self._lock:
                        self.sealed = True
                    break
                sample.t_enqueue = clock.now()
                w.busy_since = clock.now()
                if self.cfg.classifier == "size" and sample.size_bytes > self.cfg.size_cutoff:
                    self._mark_idle(w)
                    sample.classify(Classification.SLOW)
                    with self._lock:
                        self.temp_insertions += 1
                    yield Put(w.temp, (sample, 0))
                    w.samples += 1
                    continue
                t_out = self.policy.t_out if self.cfg.classifier == "timeout" else math.inf
                routed = yield from process_sample(sample, t_out, w.fast, w.temp, clock, self.rng,
                                                   on_routed=lambda r, w=w: self._mark_idle(w))
                w.samples += 1
                w.foreground_ms.append(routed.foreground_ms)
                if routed.foreground_ms > t_out:
                    self.max_foreground_over_budget = max(self.max_foreground_over_budget,
                                                          routed.foreground_ms - t_out)
                if routed.route == FAST:
                    with self._lock:
                        self.fast_count += 1
                    self.profiler.record(SampleStats.from_sample(sample))
                else:
                    with self._lock:
                        self.temp_insertions += 1
        except QueueClosed:
            log.info("worker %d: output queue closed, shutting down", w.wid)
        finally:
            self._mark_idle(w)
            w.exited_at = clock.now()
            if self._shared is not None:
                self._shared[0].release()
                self._shared[1].release()
            else:
                w.fast.close()
                w.temp.close()

    def _on_resumed(self, sample: Sample) -> None:
        with self._lock:
            self.slow_completed += 1
        self.profiler.record(SampleStats.from_sample(sample))

    def _background(self, w: _Worker) -> Process:
        on_exit = self._shared[2].release if self._shared is not None else None
        yield from resume_slow(w.temp, w.slow, self.clock, self.rng, on_done=self._on_resumed, on_exit=on_exit)


class BalancedLoader:
    """Timeout-balanced loader driving ``n_consumers`` simulated consumers."""

    def __init__(self, runtime, samples: Sequence[Sample], cfg: BalancedConfig,
                 consumer: ConsumerConfig, seed: int = 0) -> None:
        self.runtime = runtime
        self.cfg = cfg
        self.consumer_cfg = consumer
        self.rng = random.Random(seed)
        self.source = SampleSource(samples)
        if cfg.classifier == "timeout" and cfg.timeout_ms is not None:
            self.policy = TimeoutPolicy(cfg.timeout_ms, "configured")
        else:
            self.policy = TimeoutPolicy()
        self.profiler = ProfilerState(cfg.profile_window, cfg.warmup_ms)
        self.pool = WorkerPool(runtime, self.source, self.policy, self.profiler, cfg, self.rng)
        self.batch_queues = [
            BoundedQueue(cfg.queue_capacity, role="batch", name=f"gpu{k}.batch") for k in range(cfg.n_consumers)
        ]
        self.batches: list = [[] for _ in range(cfg.n_consumers)]
        self.batch_traces: list = [[] for _ in range(cfg.n_consumers)]
        self.scheduler_trace: list = []
        self.consumers: list = []

    @property
    def initial_workers(self) -> int:
        sc = self.cfg.scheduler
        return sc.initial_workers if sc is not None else self.cfg.workers

    def start(self) -> "BalancedLoader":
        rt = self.runtime
        for _ in range(self.initial_workers):
            self.pool.spawn()
        for k, bq in enumerate(self.batch_queues):
            rt.spawn(build_batches(self.pool.fast_queues, self.pool.slow_queues, bq, self.cfg.batch_size,
                                   rt.clock, self.cfg.batcher_sleep, sealed=lambda: self.pool.sealed,
                                   trace=self.batch_traces[k], on_batch=self.batches[k].append),
                     f"batcher{k}")
            self.consumers.append(run_consumer(self.consumer_cfg, bq, rt, f"gpu{k}"))
        stop = lambda: self.pool.sealed
        if self.cfg.classifier == "timeout" and self.cfg.adaptive_timeout:
            rt.spawn(profiler_loop(self.profiler, self.policy, rt.clock, stop, self.cfg.profile_interval),
                     "profiler")
        if self.cfg.scheduler is not None:
            rt.spawn(scheduler_loop(self.pool, self.batch_queues, self.cfg.scheduler, rt.clock, stop,
                                    self.scheduler_trace), "scheduler")
        return self

    def all_queues(self) -> list:
        qs = list(self.batch_queues)
        for w in self.pool.workers:
            qs.extend((w.fast, w.temp, w.slow))
        return qs

    def abort(self) -> None:
        with self.pool._lock:
            self.pool.sealed = True
        for q in self.all_queues():
            q.close()
