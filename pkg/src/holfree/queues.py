"""Bounded FIFO channels connecting pipeline stages.

A :class:`BoundedQueue` is thread-safe for direct blocking use from realtime
threads, and also serves as a blocking primitive for the virtual-time engine:
processes that block on it in virtual mode are parked on the queue and resumed
by direct hand-off when the state changes, which keeps delivery FIFO and
deterministic.
"""

from __future__ import annotations

import threading
from collections import deque
from typing import Any, Optional


class QueueClosed(Exception):
    """Signal to a producer that its queue has shut down."""


class _Marker:
    def __init__(self, name: str) -> None:
        self._name = name

    def __repr__(self) -> str:
        return self._name

    def __reduce__(self):
        return self._name


END = _Marker("END")
EMPTY = _Marker("EMPTY")

ROLES = ("fast", "slow", "temp", "batch", "input", "device", "internal")

DEFAULT_CAPACITY = 100


class BoundedQueue:
    def __init__(self, capacity: int = DEFAULT_CAPACITY, role: str = "internal", name: str = "") -> None:
        if capacity <= 0:
            raise ValueError(f"capacity must be positive, got {capacity}")
        if role not in ROLES:
            raise ValueError(f"unknown queue role {role!r}")
        self.capacity = capacity
        self.role = role
        self.name = name or role
        self._items: deque = deque()
        self._closed = False
        self._lock = threading.Lock()
        self._not_empty = threading.Condition(self._lock)
        self._not_full = threading.Condition(self._lock)
        # virtual-mode parking lots; touched only by the single engine thread
        self._engine = None
        self._getters: deque = deque()
        self._putters: deque = deque()
        self.puts = 0
        self.gets = 0
        self.high_water = 0

    def __repr__(self) -> str:
        return f"BoundedQueue({self.name!r}, {len(self._items)}/{self.capacity}{', closed' if self._closed else ''})"

    def __len__(self) -> int:
        return len(self._items)

    @property
    def closed(self) -> bool:
        return self._closed

    @property
    def drained(self) -> bool:
        """Closed and empty: nothing more will ever come out."""
        return self._closed and not self._items

    # ---------------------------------------------------------------- core

    def _append(self, item: Any) -> None:
        self._items.append(item)
        self.puts += 1
        n = len(self._items)
        assert n <= self.capacity, f"{self.name}: length {n} exceeds capacity {self.capacity}"
        if n > self.high_water:
            self.high_water = n
        self._not_empty.notify()

    def _pop(self) -> Any:
        item = self._items.popleft()
        self.gets += 1
        self._not_full.notify()
        return item

    def try_put(self, item: Any) -> bool:
        with self._lock:
            if self._closed:
                raise QueueClosed(self.name)
            if len(self._items) >= self.capacity or self._putters:
                return False
            self._append(item)
            self._handoff()
            return True

    def try_get(self) -> Any:
        """Nonblocking dequeue; returns the head item or ``EMPTY``."""
        with self._lock:
            if not self._items:
                return EMPTY
            item = self._pop()
            self._handoff()
            return item

    def put(self, item: Any, timeout: Optional[float] = None) -> None:
        """Blocking enqueue for realtime threads."""
        with self._not_full:
            while not self._closed and len(self._items) >= self.capacity:
                if not self._not_full.wait(timeout):
                    raise TimeoutError(self.name)
            if self._closed:
                raise QueueClosed(self.name)
            self._append(item)

    def get(self, timeout: Optional[float] = None) -> Any:
        """Blocking dequeue for realtime threads; ``END`` once closed and empty."""
        with self._not_empty:
            while not self._items and not self._closed:
                if not self._not_empty.wait(timeout):
                    raise TimeoutError(self.name)
            if not self._items:
                return END
            return self._pop()

    def close(self) -> None:
        """Refuse further puts; consumers drain what is left, then see ``END``."""
        with self._lock:
            if self._closed:
                return
            self._closed = True
            self._not_empty.notify_all()
            self._not_full.notify_all()
            self._handoff()

    # ------------------------------------------------------- virtual engine

    def _park_getter(self, engine, proc) -> None:
        self._engine = engine
        self._getters.append(proc)

    def _park_putter(self, engine, proc, item) -> None:
        self._engine = engine
        self._putters.append((proc, item))

    def _handoff(self) -> None:
        engine = self._engine
        if engine is None:
            return
        progressed = True
        while progressed:
            progressed = False
            while self._getters and self._items:
                engine._wake(self._getters.popleft(), self._pop())
                progressed = True
            while self._putters and len(self._items) < self.capacity and not self._closed:
                proc, item = self._putters.popleft()
                self._append(item)
                engine._wake(proc, None)
                progressed = True
        if self._closed:
            while self._putters:
                proc, _ = self._putters.popleft()
                engine._wake(proc, QueueClosed(self.name), throw=True)
            if not self._items:
                while self._getters:
                    engine._wake(self._getters.popleft(), END)
