"""Per-sample cost profiling and percentile-based timeout selection."""

from __future__ import annotations

import csv
import logging
import math
import threading
from collections import deque
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Iterable, Optional, Sequence

from .balancer import TimeoutPolicy
from .core import Classification, Clock, ContractError, Millis, Process, Sample, Sleep

log = logging.getLogger(__name__)

ESCALATE_ABOVE = 0.35
DEESCALATE_BELOW = 0.15


class InsufficientData(ContractError):
    """No profiling data yet; the warm-up has not recorded any sample."""


def percentile(durations: Sequence[Millis], p: float) -> Millis:
    """Nearest-rank percentile: the ``ceil(p/100 * n)``-th smallest value."""
    n = len(durations)
    if n == 0:
        raise InsufficientData("percentile of an empty set")
    if not 0 < p <= 100:
        raise ContractError(f"percentile must be in (0, 100], got {p}")
    frac = Fraction(str(p)) if isinstance(p, float) else Fraction(p)
    rank = max(1, math.ceil(frac * n / 100))
    return sorted(durations)[rank - 1]


@dataclass(frozen=True)
class SampleStats:
    sample_id: int
    size_bytes: int
    per_transform_durations: tuple
    total_duration: Millis
    transform_count: int
    slow: bool = False

    def __post_init__(self) -> None:
        if self.total_duration != sum(self.per_transform_durations):
            raise ContractError(f"sample {self.sample_id}: total != sum of step durations")

    @classmethod
    def from_sample(cls, sample: Sample) -> "SampleStats":
        steps = tuple(sample.step_ms)
        return cls(sample.id, sample.size_bytes, steps, sum(steps), len(steps),
                   sample.classification is Classification.SLOW)


class ProfilerState:
    """Sliding window of recent sample statistics.

    ``record`` may be called from many workers at once; all reads and writes
    of the window go through one lock.
    """

    def __init__(self, window: int = 1024, warmup_ms: Millis = 10_000,
                 escalate_above: float = ESCALATE_ABOVE, deescalate_below: float = DEESCALATE_BELOW,
                 keep_all: bool = False) -> None:
        if window < 1:
            raise ContractError("profiling window must hold at least one sample")
        self.window_size = window
        self.warmup_ms = warmup_ms
        self.escalate_above = escalate_above
        self.deescalate_below = deescalate_below
        self.current_percentile = 75
        self._window: deque = deque(maxlen=window)
        self._slow_in_window = 0
        self._lock = threading.Lock()
        self.since_switch = 0
        self.recorded = 0
        self.history: Optional[list] = [] if keep_all else None
        self.updates: list = []

    def __len__(self) -> int:
        return len(self._window)

    @property
    def slow_rate(self) -> float:
        with self._lock:
            n = len(self._window)
            return self._slow_in_window / n if n else 0.0

    def snapshot(self) -> list:
        with self._lock:
            return list(self._window)

    def record(self, stats: SampleStats) -> None:
        with self._lock:
            if len(self._window) == self._window.maxlen:
                self._slow_in_window -= self._window[0].slow
            self._window.append(stats)
            self._slow_in_window += stats.slow
            self.since_switch += 1
            self.recorded += 1
            if self.history is not None:
                self.history.append(stats)


def update_timeout(state: ProfilerState, policy: TimeoutPolicy, now: Optional[Millis] = None) -> Millis:
    """Recompute the timeout from the window; may switch between p75 and p90."""
    with state._lock:
        window = list(state._window)
        n = len(window)
        if not n:
            raise InsufficientData("cannot set a timeout before any sample was profiled")
        rate = state._slow_in_window / n
        if state.current_percentile == 75 and rate > state.escalate_above:
            state.current_percentile = 90
            state.since_switch = 0
            log.info("slow rate %.2f above %.2f: timeout now tracks p90", rate, state.escalate_above)
        elif (state.current_percentile == 90 and rate < state.deescalate_below
              and state.since_switch >= state.window_size):
            state.current_percentile = 75
            state.since_switch = 0
            log.info("slow rate %.2f below %.2f: timeout back to p75", rate, state.deescalate_below)
        pct = state.current_percentile
    t_out = max(1, percentile([s.total_duration for s in window], pct))
    policy.set(t_out, f"p{pct}")
    state.updates.append((now, t_out, pct, rate))
    return t_out


def profiler_loop(state: ProfilerState, policy: TimeoutPolicy, clock: Clock,
                  stop: Callable[[], bool], interval_ms: Millis = 1000) -> Process:
    """Warm up, set the first timeout, then keep refreshing it."""
    start = clock.now()
    while clock.now() - start < state.warmup_ms:
        if stop():
            return
        yield Sleep(min(interval_ms, state.warmup_ms - (clock.now() - start)))
    while not stop():
        if len(state):
            update_timeout(state, policy, clock.now())
        yield Sleep(interval_ms)


def write_profile_csv(path, records: Iterable[SampleStats]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "size_bytes", "total_ms", "n_transforms"])
        for r in records:
            w.writerow([r.sample_id, r.size_bytes, r.total_duration, r.transform_count])
