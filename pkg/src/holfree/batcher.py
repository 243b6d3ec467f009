"""Batch assembly that prefers finished-fast samples over resumed slow ones."""

from __future__ import annotations

import logging
from typing import Callable, Optional, Sequence

from .core import Batch, Clock, ContractError, Process, Put, Sleep
from .queues import EMPTY, QueueClosed

log = logging.getLogger(__name__)

SLEEP_MS = 10


def _take_round_robin(queues: Sequence, start: int):
    n = len(queues)
    for k in range(n):
        j = (start + k) % n
        item = queues[j].try_get()
        if item is not EMPTY:
            return item, (j + 1) % n
    return EMPTY, start


def build_batches(
    fast_queues: Sequence,
    slow_queues: Sequence,
    batch_queue,
    batch_size: int,
    clock: Clock,
    sleep_ms: int = SLEEP_MS,
    sealed: Callable[[], bool] = lambda: True,
    trace: Optional[list] = None,
    on_batch: Optional[Callable[[Batch], None]] = None,
) -> Process:
    """Fill batches slot by slot: any fast sample first, else any slow sample.

    ``fast_queues``/``slow_queues`` may grow while running (the worker pool
    appends to them); ``sealed()`` reports that no more will be added. Once
    sealed and every source queue is closed and empty, a nonempty partial
    batch is flushed and ``batch_queue`` is closed.

    When ``trace`` is a list, one ``(time, source, fast_ready, slow_ready)``
    tuple is appended per filled slot, the flags saying which queue kinds
    held a sample when the slot was decided.
    """
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    rr_fast = rr_slow = 0
    seq = 0
    batch: list = []
    while True:
        while len(batch) < batch_size:
            if trace is not None:
                fast_ready = any(len(q) for q in fast_queues)
                slow_ready = any(len(q) for q in slow_queues)
            sample, rr_fast = _take_round_robin(fast_queues, rr_fast)
            source = "fast"
            if sample is EMPTY:
                sample, rr_slow = _take_round_robin(slow_queues, rr_slow)
                source = "slow"
            if sample is EMPTY:
                if sealed() and all(q.drained for q in fast_queues) and all(q.drained for q in slow_queues):
                    if batch:
                        b = Batch(batch, clock.now(), seq)
                        if on_batch is not None:
                            on_batch(b)
                        try:
                            yield Put(batch_queue, b)
                        except QueueClosed:
                            return seq
                    batch_queue.close()
                    log.debug("batcher for %s finished after %d batches", batch_queue.name, seq + bool(batch))
                    return seq + bool(batch)
                yield Sleep(sleep_ms)
                continue
            if trace is not None:
                trace.append((clock.now(), source, fast_ready, slow_ready))
            batch.append(sample)
        b = Batch(batch, clock.now(), seq)
        if on_batch is not None:
            on_batch(b)
        try:
            yield Put(batch_queue, b)
        except QueueClosed:
            log.info("%s closed under the batcher; stopping", batch_queue.name)
            return seq
        seq += 1
        batch = []
