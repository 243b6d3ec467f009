"""Simulated accelerator that consumes batches.

Each consumer stands in for one GPU: it polls its batch queue, spends a
fixed transfer time moving a batch to the device and a fixed compute time
training on it. With prefetch enabled, the transfer of batch i runs while
batch i-1 is still computing. Busy time is compute time only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .core import Clock, ContractError, Get, Millis, Process, Put, Sleep
from .queues import EMPTY, END, BoundedQueue

POLL_MS = 10


@dataclass
class ConsumerConfig:
    compute_per_batch: Millis
    transfer_per_batch: Millis = 0
    poll_sleep: Millis = POLL_MS
    prefetch: bool = True
    horizon: Optional[Millis] = None
    max_batches: Optional[int] = None

    def __post_init__(self) -> None:
        if self.compute_per_batch < 0 or self.transfer_per_batch < 0:
            raise ContractError("compute and transfer durations must be >= 0")
        if self.poll_sleep <= 0:
            raise ContractError("poll_sleep must be positive")


@dataclass
class BatchRecord:
    seq: int
    size: int
    nbytes: float
    sealed_at: Millis
    received_at: Millis
    compute_start: Millis
    compute_end: Millis


@dataclass
class ConsumerStats:
    name: str
    start: Millis = 0
    end: Millis = 0
    busy_ms: Millis = 0
    poll_sleeps: int = 0
    polled_ms: Millis = 0
    finished: bool = False
    records: list = field(default_factory=list)
    sample_ids: list = field(default_factory=list)

    @property
    def span(self) -> Millis:
        return self.end - self.start

    @property
    def idle_ms(self) -> Millis:
        return self.span - self.busy_ms

    @property
    def idle_fraction(self) -> float:
        return self.idle_ms / self.span if self.span else 0.0

    @property
    def busy_fraction(self) -> float:
        return self.busy_ms / self.span if self.span else 0.0

    @property
    def nbytes(self) -> float:
        return sum(r.nbytes for r in self.records)

    @property
    def throughput(self) -> float:
        """Bytes per second over the consumer's span."""
        return self.nbytes / (self.span / 1000.0) if self.span else 0.0


def next_batch(batch_queue: BoundedQueue, clock: Clock, poll_sleep: Millis = POLL_MS,
               deadline: Optional[Millis] = None, stats: Optional[ConsumerStats] = None) -> Process:
    """Poll for the head batch, sleeping ``poll_sleep`` between attempts.

    Returns the batch, or ``END`` once the queue is closed and empty (or the
    deadline passes).
    """
    while True:
        item = batch_queue.try_get()
        if item is not EMPTY:
            return item
        if batch_queue.drained:
            return END
        if deadline is not None and clock.now() >= deadline:
            return END
        yield Sleep(poll_sleep)
        if stats is not None:
            stats.poll_sleeps += 1
            stats.polled_ms += poll_sleep


def _compute(config: ConsumerConfig, stats: ConsumerStats, clock: Clock, batch, received: Millis) -> Process:
    t0 = clock.now()
    if config.compute_per_batch:
        yield Sleep(config.compute_per_batch)
    t1 = clock.now()
    stats.busy_ms += t1 - t0
    stats.records.append(BatchRecord(batch.seq, len(batch), batch.nbytes, batch.sealed_at, received, t0, t1))
    stats.sample_ids.extend(batch.ids)
    stats.end = max(stats.end, t1)


def _finish(config: ConsumerConfig, stats: ConsumerStats, clock: Clock) -> None:
    end = clock.now() if not stats.records else stats.records[-1].compute_end
    if config.horizon is not None:
        end = max(end, stats.start + config.horizon)
    stats.end = max(stats.end, end)
    stats.finished = True


def _deadline(config: ConsumerConfig, stats: ConsumerStats) -> Optional[Millis]:
    return None if config.horizon is None else stats.start + config.horizon


def _serial_loop(config, batch_queue, clock, stats) -> Process:
    stats.start = stats.end = clock.now()
    n = 0
    while config.max_batches is None or n < config.max_batches:
        batch = yield from next_batch(batch_queue, clock, config.poll_sleep, _deadline(config, stats), stats)
        if batch is END:
            break
        received = clock.now()
        if config.transfer_per_batch:
            yield Sleep(config.transfer_per_batch)
        yield from _compute(config, stats, clock, batch, received)
        n += 1
    _finish(config, stats, clock)
    return stats


def _transfer_loop(config, batch_queue, device_queue, clock, stats) -> Process:
    n = 0
    while config.max_batches is None or n < config.max_batches:
        batch = yield from next_batch(batch_queue, clock, config.poll_sleep, _deadline(config, stats), stats)
        if batch is END:
            break
        received = clock.now()
        if config.transfer_per_batch:
            yield Sleep(config.transfer_per_batch)
        yield Put(device_queue, (batch, received))
        n += 1
    device_queue.close()


def _device_loop(config, device_queue, clock, stats) -> Process:
    while True:
        item = yield Get(device_queue)
        if item is END:
            break
        batch, received = item
        yield from _compute(config, stats, clock, batch, received)
    _finish(config, stats, clock)
    return stats


def run_consumer(config: ConsumerConfig, batch_queue: BoundedQueue, runtime, name: str = "gpu0") -> ConsumerStats:
    """Spawn the consumer's processes on ``runtime``; stats fill in as it runs."""
    stats = ConsumerStats(name)
    stats.start = stats.end = runtime.clock.now()
    if config.prefetch:
        device = BoundedQueue(1, role="device", name=f"{name}.device")
        runtime.spawn(_transfer_loop(config, batch_queue, device, runtime.clock, stats), f"{name}.transfer")
        runtime.spawn(_device_loop(config, device, runtime.clock, stats), f"{name}.compute")
    else:
        runtime.spawn(_serial_loop(config, batch_queue, runtime.clock, stats), f"{name}.serial")
    return stats
