"""Sample-aware load balancing under a per-sample timeout.

A foreground worker applies a sample's transforms while watching a time
budget. Samples that finish within budget go to the worker's fast queue.
When the budget runs out mid-transform, the in-progress transform is
abandoned (its effect is never applied), and ``(sample, index)`` moves to the
temp queue. A background resume worker later re-runs the chain from that
index and hands the finished sample to the slow queue.
"""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass
from typing import Any, Callable, Optional

from .core import Classification, Clock, ContractError, Get, Millis, Process, Put, Sample, Sleep, apply_transform
from .queues import END, QueueClosed

log = logging.getLogger(__name__)

FAST = "fast"
TEMP = "temp"


class TimeoutPolicy:
    """The current timeout, shared by all balancer workers.

    Writers swap ``(t_out, source)`` as one tuple under a lock; readers take
    the tuple in a single attribute load, so they always see a consistent pair.
    """

    SOURCES = ("configured", "p75", "p90")

    def __init__(self, t_out: float = math.inf, source: str = "configured") -> None:
        self._lock = threading.Lock()
        self._state = self._check(t_out, source)
        self.updates = 0

    @classmethod
    def _check(cls, t_out: float, source: str) -> tuple:
        if not t_out > 0:
            raise ContractError(f"timeout must be positive, got {t_out}")
        if source not in cls.SOURCES:
            raise ContractError(f"unknown timeout source {source!r}")
        return (t_out, source)

    @property
    def t_out(self) -> float:
        return self._state[0]

    @property
    def source(self) -> str:
        return self._state[1]

    def snapshot(self) -> tuple:
        return self._state

    def set(self, t_out: float, source: str) -> None:
        state = self._check(t_out, source)
        with self._lock:
            self._state = state
            self.updates += 1


@dataclass
class Routed:
    route: str
    foreground_ms: Millis
    index: Optional[int] = None


def process_sample(
    sample: Sample,
    t_out: float,
    fast_queue,
    temp_queue,
    clock: Clock,
    rng: Any = None,
    on_routed: Optional[Callable[[Routed], None]] = None,
) -> Process:
    """Foreground preprocessing of one sample; returns a :class:`Routed`.

    Synthetic transforms (those with a cost model) are interrupted exactly when
    the budget expires. Transforms that only carry a real ``apply`` function
    cannot be preempted, so the budget is checked after each one completes.
    Raises ``QueueClosed`` if the destination queue has shut down.
    """
    if sample.next_index != 0 or sample.classification is not Classification.UNCLASSIFIED:
        raise ContractError(f"sample {sample.id} was already processed")
    chain = sample.chain
    start = clock.now()
    for i in range(len(chain)):
        transform = chain[i]
        used = clock.now() - start
        if transform.cost_model is not None:
            ms = transform.duration(sample, rng)
            if used + ms > t_out:
                # budget expires inside transform i: charge exactly t_out and drop the partial work
                rest = t_out - used
                if rest > 0:
                    yield Sleep(int(rest))
                return (yield from _to_temp(sample, i, temp_queue, clock, start, on_routed))
            if ms:
                yield Sleep(ms)
            sample.complete_step(i, ms)
        else:
            yield from apply_transform(sample, i, rng)
            if clock.now() - start > t_out and not sample.done:
                return (yield from _to_temp(sample, i + 1, temp_queue, clock, start, on_routed))
    elapsed = clock.now() - start
    if elapsed > t_out:
        # only reachable by cooperative overrun on the last real-function step
        return (yield from _to_temp(sample, len(chain), temp_queue, clock, start, on_routed))
    sample.classify(Classification.FAST)
    sample.t_ready = clock.now()
    routed = Routed(FAST, elapsed)
    if on_routed is not None:
        on_routed(routed)
    yield Put(fast_queue, sample)
    return routed


def _to_temp(sample, index, temp_queue, clock, start, on_routed) -> Process:
    sample.classify(Classification.SLOW)
    routed = Routed(TEMP, clock.now() - start, index)
    if on_routed is not None:
        on_routed(routed)
    yield Put(temp_queue, (sample, index))
    return routed


def resume_slow(
    temp_queue,
    slow_queue,
    clock: Clock,
    rng: Any = None,
    on_done: Optional[Callable[[Sample], None]] = None,
    on_exit: Optional[Callable[[], None]] = None,
) -> Process:
    """Background loop completing timed-out samples.

    The interrupted transform is re-executed from scratch, followed by the
    rest of the chain. Exits on end-of-stream from ``temp_queue``, calling
    ``on_exit`` (by default closing ``slow_queue``).
    """
    while True:
        item = yield Get(temp_queue)
        if item is END:
            break
        sample, index = item
        if sample.next_index != index:
            raise ContractError(
                f"sample {sample.id}: resume index {index} != next_index {sample.next_index}"
            )
        while not sample.done:
            yield from apply_transform(sample, sample.next_index, rng)
        sample.t_ready = clock.now()
        if on_done is not None:
            on_done(sample)
        try:
            yield Put(slow_queue, sample)
        except QueueClosed:
            log.info("%s closed under the resume worker; stopping", slow_queue.name)
            break
    if on_exit is not None:
        on_exit()
    else:
        slow_queue.close()

