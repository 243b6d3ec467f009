"""Execution engines for generator processes.

``VirtualRuntime`` is a discrete-event engine: a heap of ``(time, seq)``-ordered
resumptions over a :class:`VirtualClock`. Ties are broken by scheduling order,
so a run is a pure function of its inputs.

``RealtimeRuntime`` drives each process on its own thread, turning ``Sleep``
into ``time.sleep`` and ``Get``/``Put`` into blocking queue calls.
"""

from __future__ import annotations

import heapq
import logging
import threading
import time
from typing import Any, Optional

from .core import ContractError, Get, Process, Put, RealtimeClock, Sleep, VirtualClock
from .queues import EMPTY, END, QueueClosed

log = logging.getLogger(__name__)


class _Proc:
    __slots__ = ("gen", "name", "done", "result")

    def __init__(self, gen: Process, name: str) -> None:
        self.gen = gen
        self.name = name
        self.done = False
        self.result = None

    def __repr__(self) -> str:
        return f"<proc {self.name}{' done' if self.done else ''}>"


class VirtualRuntime:
    mode = "virtual"

    def __init__(self) -> None:
        self.clock = VirtualClock()
        self._heap: list = []
        self._seq = 0
        self.procs: list[_Proc] = []
        self.events = 0

    def spawn(self, gen: Process, name: str = "") -> _Proc:
        proc = _Proc(gen, name or f"p{len(self.procs)}")
        self.procs.append(proc)
        self._schedule(self.clock.now(), proc, None, False)
        return proc

    def _schedule(self, t: int, proc: _Proc, value: Any, throw: bool) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, proc, value, throw))

    def _wake(self, proc: _Proc, value: Any, throw: bool = False) -> None:
        self._schedule(self.clock.now(), proc, value, throw)

    def _step(self, proc: _Proc, value: Any, throw: bool) -> None:
        gen = proc.gen
        while True:
            try:
                cmd = gen.throw(value) if throw else gen.send(value)
            except StopIteration as stop:
                proc.done = True
                proc.result = stop.value
                return
            throw = False
            kind = type(cmd)
            if kind is Sleep:
                self._schedule(self.clock.now() + cmd.ms, proc, None, False)
                return
            if kind is Get:
                q = cmd.queue
                item = q.try_get()
                if item is not EMPTY:
                    value = item
                    continue
                if q.closed:
                    value = END
                    continue
                q._park_getter(self, proc)
                return
            if kind is Put:
                q = cmd.queue
                try:
                    ok = q.try_put(cmd.item)
                except QueueClosed as exc:
                    value, throw = exc, True
                    continue
                if ok:
                    value = None
                    continue
                q._park_putter(self, proc, cmd.item)
                return
            raise ContractError(f"{proc.name} yielded unsupported command {cmd!r}")

    def run(self, until: Optional[int] = None) -> int:
        """Run until no events remain (or past ``until``); returns final time."""
        heap = self._heap
        clock = self.clock
        while heap:
            if until is not None and heap[0][0] > until:
                clock.advance_to(until)
                break
            t, _, proc, value, throw = heapq.heappop(heap)
            clock.advance_to(t)
            self.events += 1
            self._step(proc, value, throw)
        return clock.now()

    def blocked(self) -> list[_Proc]:
        """Processes that never finished (parked on a queue forever)."""
        return [p for p in self.procs if not p.done]


class RealtimeRuntime:
    mode = "realtime"

    def __init__(self, scale: float = 1.0) -> None:
        self.clock = RealtimeClock(scale)
        self.procs: list[_Proc] = []
        self._threads: list[threading.Thread] = []
        self._lock = threading.Lock()
        self.errors: list[BaseException] = []

    def spawn(self, gen: Process, name: str = "") -> _Proc:
        proc = _Proc(gen, name or f"p{len(self.procs)}")
        th = threading.Thread(target=self._drive, args=(proc,), name=proc.name, daemon=True)
        with self._lock:
            self.procs.append(proc)
            self._threads.append(th)
        th.start()
        return proc

    def _drive(self, proc: _Proc) -> None:
        gen = proc.gen
        value: Any = None
        throw = False
        while True:
            try:
                cmd = gen.throw(value) if throw else gen.send(value)
            except StopIteration as stop:
                proc.done = True
                proc.result = stop.value
                return
            except BaseException as exc:  # surfaced by run()
                log.exception("process %s failed", proc.name)
                self.errors.append(exc)
                proc.done = True
                return
            throw = False
            kind = type(cmd)
            if kind is Sleep:
                if cmd.ms:
                    time.sleep(cmd.ms * self.clock.scale / 1000.0)
                value = None
            elif kind is Get:
                value = cmd.queue.get()
            elif kind is Put:
                try:
                    cmd.queue.put(cmd.item)
                    value = None
                except QueueClosed as exc:
                    value, throw = exc, True
            else:
                value, throw = ContractError(f"unsupported command {cmd!r}"), True

    def run(self, timeout: Optional[float] = None) -> bool:
        """Join every process (including ones spawned meanwhile).

        Returns False if ``timeout`` seconds elapse first.
        """
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            with self._lock:
                pending = [t for t in self._threads if t.is_alive()]
            if not pending:
                break
            for th in pending:
                remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
                th.join(remaining)
                if deadline is not None and time.monotonic() >= deadline and th.is_alive():
                    return False
        if self.errors:
            raise self.errors[0]
        return True


def make_runtime(mode: str, scale: float = 1.0):
    if mode == "virtual":
        return VirtualRuntime()
    if mode == "realtime":
        return RealtimeRuntime(scale)
    raise ValueError(f"unknown mode {mode!r} (expected virtual or realtime)")
